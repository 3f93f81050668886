//! Micro-benchmarks with a trimmed-round protocol: every round times
//! `iters_per_round` calls, and the `trim` fastest and slowest rounds are
//! dropped before averaging.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::analysis::{conv_macs, count_macs, mldc_macs};
use crate::blocks::{Block, MixerMode, MixerSpec, MldcBlock};
use crate::error::{Error, Result};
use crate::model::{build_model, default_config, INPUT_MULTIPLE};
use crate::ops::{conv2d, out_shape, Conv2dLayer, ConvGeometry};
use crate::reparam::reparameterize_model;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BenchProtocol {
    pub rounds: usize,
    pub iters_per_round: usize,
    pub trim: usize,
    /// Untimed calls before the first round.
    pub warmup: usize,
    pub threads: usize,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        BenchProtocol {
            rounds: 50,
            iters_per_round: 50,
            trim: 10,
            warmup: 5,
            threads: 1,
        }
    }
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.iters_per_round == 0 || self.threads == 0 {
            return Err(Error::InvalidArgument(
                "rounds, iterations and threads must be >= 1".into(),
            ));
        }
        if 2 * self.trim >= self.rounds {
            return Err(Error::InvalidArgument(format!(
                "trim {} leaves no rounds out of {}",
                self.trim, self.rounds
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrimmedStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

/// Mean of the sorted samples with `trim` dropped from each end, plus the
/// median and minimum of all samples.
pub fn trimmed_stats(times: &[f64], trim: usize) -> Result<TrimmedStats> {
    if 2 * trim >= times.len() {
        return Err(Error::InvalidArgument(format!(
            "trim {trim} on each side leaves nothing of {} samples",
            times.len()
        )));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let interior = &sorted[trim..sorted.len() - trim];
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(TrimmedStats {
        mean: interior.iter().sum::<f64>() / interior.len() as f64,
        median,
        min: sorted[0],
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BenchCase {
    /// Dense 3x3 conv with the given dilation.
    Dilated3x3 { dilation: usize },
    /// Dense `k x k` conv, dilation 1.
    DenseKxK { kernel: usize },
    /// MLDC block with the default two-branch mixer.
    MldcBlock,
    /// MLDC block whose mixer is a single 1x1 conv.
    PwMixer,
    Model { variant: String, fused: bool },
}

impl BenchCase {
    pub fn label(&self) -> String {
        match self {
            BenchCase::Dilated3x3 { dilation } => format!("dilated3x3_d{dilation}"),
            BenchCase::DenseKxK { kernel } => format!("dense{kernel}x{kernel}"),
            BenchCase::MldcBlock => "mldc_block".into(),
            BenchCase::PwMixer => "pw_mixer".into(),
            BenchCase::Model { variant, fused } => {
                format!("model_{variant}{}", if *fused { "_fused" } else { "" })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub label: String,
    pub shape: Vec<usize>,
    pub macs: u64,
    pub round_times_ns: Vec<u64>,
    pub trimmed_mean_ns: f64,
    pub median_ns: f64,
    pub min_ns: f64,
    pub threads: usize,
}

/// A runnable case: its MAC count and a closure performing one call.
pub struct Prepared {
    pub label: String,
    pub shape: Vec<usize>,
    pub macs: u64,
    pub run: Box<dyn FnMut() -> Result<()> + Send>,
}

fn conv_case(label: String, shape: &[usize], kernel: usize, dilation: usize, rng: &mut Rng) -> Result<Prepared> {
    let [n, c, h, w] = *shape else {
        return Err(Error::InvalidShape(shape.to_vec()));
    };
    let layer = Conv2dLayer::<f32>::he_init(c, c, kernel, ConvGeometry::same(kernel, dilation, 1), false, rng)?;
    let (ho, wo) = out_shape(h, w, &layer)?;
    let x = Tensor::randn(shape, rng, 0.0, 1.0)?;
    Ok(Prepared {
        label,
        shape: shape.to_vec(),
        macs: conv_macs(&layer, n, ho, wo),
        run: Box::new(move || {
            black_box(conv2d(&x, &layer)?);
            Ok(())
        }),
    })
}

fn mixer_case(label: String, shape: &[usize], mode: MixerMode, rng: &mut Rng) -> Result<Prepared> {
    let [n, c, h, w] = *shape else {
        return Err(Error::InvalidShape(shape.to_vec()));
    };
    let spec = MixerSpec {
        mode,
        ..Default::default()
    };
    let block = MldcBlock::<f32>::new(c, &spec, rng)?;
    let x = Tensor::randn(shape, rng, 0.0, 1.0)?;
    Ok(Prepared {
        label,
        shape: shape.to_vec(),
        macs: mldc_macs(&block, n, h, w)?,
        run: Box::new(move || {
            black_box(block.forward(&x)?);
            Ok(())
        }),
    })
}

/// Builds the inputs for `case` at `shape` (`[N, C, H, W]`; for models C
/// must be 3 and H = W).
pub fn prepare(case: &BenchCase, shape: &[usize], seed: u64) -> Result<Prepared> {
    let mut rng = Rng::new(seed);
    let label = case.label();
    match case {
        BenchCase::Dilated3x3 { dilation } => conv_case(label, shape, 3, *dilation, &mut rng),
        BenchCase::DenseKxK { kernel } => conv_case(label, shape, *kernel, 1, &mut rng),
        BenchCase::MldcBlock => mixer_case(label, shape, MixerMode::Mldc, &mut rng),
        BenchCase::PwMixer => mixer_case(label, shape, MixerMode::Pointwise, &mut rng),
        BenchCase::Model { variant, fused } => {
            let [n, c, h, w] = *shape else {
                return Err(Error::InvalidShape(shape.to_vec()));
            };
            if c != 3 || h != w {
                return Err(Error::InvalidArgument(format!(
                    "model benchmarks need [N, 3, R, R] inputs, got {shape:?}"
                )));
            }
            if h % INPUT_MULTIPLE != 0 {
                return Err(Error::geometry(format!("resolution {h} is not divisible by {INPUT_MULTIPLE}")));
            }
            let cfg = crate::model::ModelConfig {
                seed,
                ..default_config(variant)?
            };
            let mut model = build_model::<f32>(&cfg)?;
            if *fused {
                model = reparameterize_model(&model)?.0;
            }
            let macs = n as u64 * count_macs(&model, h)?;
            let x = Tensor::randn(shape, &mut rng, 0.0, 1.0)?;
            Ok(Prepared {
                label,
                shape: shape.to_vec(),
                macs,
                run: Box::new(move || {
                    black_box(model.forward(&x)?);
                    Ok(())
                }),
            })
        }
    }
}

/// Times a prepared case under `protocol` on a dedicated thread pool.
pub fn measure(mut case: Prepared, protocol: &BenchProtocol) -> Result<BenchResult> {
    protocol.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(protocol.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let rounds = pool.install(|| -> Result<Vec<u64>> {
        for _ in 0..protocol.warmup {
            (case.run)()?;
        }
        let mut rounds = Vec::with_capacity(protocol.rounds);
        for _ in 0..protocol.rounds {
            let start = Instant::now();
            for _ in 0..protocol.iters_per_round {
                (case.run)()?;
            }
            rounds.push(start.elapsed().as_nanos() as u64);
        }
        Ok(rounds)
    })?;
    let as_f64: Vec<f64> = rounds.iter().map(|&t| t as f64).collect();
    let stats = trimmed_stats(&as_f64, protocol.trim)?;
    Ok(BenchResult {
        label: case.label,
        shape: case.shape,
        macs: case.macs,
        round_times_ns: rounds,
        trimmed_mean_ns: stats.mean,
        median_ns: stats.median,
        min_ns: stats.min,
        threads: protocol.threads,
    })
}

pub fn bench_case(case: &BenchCase, shape: &[usize], protocol: &BenchProtocol, seed: u64) -> Result<BenchResult> {
    measure(prepare(case, shape, seed)?, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimmed_one_to_fifty() {
        let times: Vec<f64> = (1..=50).map(f64::from).collect();
        let s = trimmed_stats(&times, 10).unwrap();
        assert_eq!(s.mean, 25.5);
        assert_eq!(s.median, 25.5);
        assert_eq!(s.min, 1.0);
    }

    #[test]
    fn constant_samples() {
        let s = trimmed_stats(&[4.0; 9], 2).unwrap();
        assert_eq!((s.mean, s.median, s.min), (4.0, 4.0, 4.0));
    }

    #[test]
    fn over_trim() {
        let times: Vec<f64> = (1..=50).map(f64::from).collect();
        assert!(matches!(trimmed_stats(&times, 25), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn permutation_invariant() {
        let mut times: Vec<f64> = (0..30).map(|i| ((i * 37) % 101) as f64).collect();
        let a = trimmed_stats(&times, 5).unwrap();
        times.reverse();
        assert_eq!(a, trimmed_stats(&times, 5).unwrap());
    }

    #[test]
    fn quick_run_reports_all_rounds() {
        let p = BenchProtocol {
            rounds: 5,
            iters_per_round: 2,
            trim: 1,
            warmup: 1,
            threads: 1,
        };
        let r = bench_case(&BenchCase::Dilated3x3 { dilation: 3 }, &[1, 4, 8, 8], &p, 0).unwrap();
        assert_eq!(r.round_times_ns.len(), 5);
        assert_eq!(r.macs, 9 * 4 * 4 * 64);
    }
}
