//! Exact t-SNE for the corpus-similarity diagnostic.
//!
//! Points are processed in a canonical order (rows sorted lexicographically
//! by feature vector) and initial coordinates are drawn per canonical index,
//! so permuting the input rows permutes the output rows identically.

use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub beta: f64,
    pub perplexity: f64,
    /// Conditional probabilities p_{j|i} over the given neighbours.
    pub probs: Vec<f64>,
    pub warning: Option<String>,
}

const CALIBRATION_STEPS: usize = 200;
const PERPLEXITY_TOLERANCE: f64 = 1e-5;

/// Entropy (nats) and normalized conditionals for precision `beta`.
fn conditional(dist: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let dmin = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = dist.iter().map(|&d| (-beta * (d - dmin)).exp()).collect();
    let sum: f64 = w.iter().sum();
    let weighted: f64 = dist.iter().zip(&w).map(|(&d, &p)| (d - dmin) * p).sum();
    let h = sum.ln() + beta * weighted / sum;
    (h, w.into_iter().map(|p| p / sum).collect())
}

/// Binary search on the Gaussian precision so the conditional distribution
/// over the other points reaches the target perplexity.
///
/// `distances` holds squared distances from point i to every other point.
pub fn calibrate_perplexity(distances: &[f64], target: f64) -> Result<Calibration> {
    let n = distances.len() + 1;
    if n < 2 {
        return Err(Error::Input("perplexity calibration needs at least 2 points".into()));
    }
    if !(target > 0.0) || target >= n as f64 {
        return Err(Error::Input(format!(
            "perplexity {target} is infeasible for {n} points"
        )));
    }
    if distances.iter().all(|&d| d == 0.0) {
        let m = distances.len();
        return Ok(Calibration {
            beta: 1.0,
            perplexity: m as f64,
            probs: vec![1.0 / m as f64; m],
            warning: Some("all distances are zero; conditionals are uniform".into()),
        });
    }

    let log_target = target.ln();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..CALIBRATION_STEPS {
        let (h, probs) = conditional(distances, beta);
        let perp = h.exp();
        let err = (perp - target).abs();
        if best.as_ref().is_none_or(|b| err < (b.1 - target).abs()) {
            best = Some((beta, perp, probs));
        }
        if err < PERPLEXITY_TOLERANCE {
            break;
        }
        if h > log_target {
            lo = beta;
            beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    let (beta, perplexity, probs) = best.expect("at least one step");
    let warning = ((perplexity - target).abs() >= 1e-3)
        .then(|| format!("perplexity search stopped at {perplexity} (target {target})"));
    Ok(Calibration {
        beta,
        perplexity,
        probs,
        warning,
    })
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Symmetrized joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2n`, row-major n×n.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<(Vec<f64>, Vec<String>)> {
    let n = x.len();
    let d = squared_distances(x);
    let mut cond = vec![0.0; n * n];
    let mut warnings = Vec::new();
    for i in 0..n {
        let others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).collect();
        let cal = calibrate_perplexity(&others, perplexity)?;
        if let Some(w) = cal.warning {
            warnings.push(format!("point {i}: {w}"));
        }
        let mut it = cal.probs.into_iter();
        for j in (0..n).filter(|&j| j != i) {
            cond[i * n + j] = it.next().unwrap();
        }
    }
    let mut p = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) * scale;
        }
    }
    Ok((p, warnings))
}

/// Student-t (one degree of freedom) affinities of 2-D coordinates, row-major
/// n×n, plus the unnormalized kernel values.
pub fn student_t_affinities(y: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    let q = num.iter().map(|&v| v / sum).collect();
    (q, num)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(1e-300)).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// One coordinate pair per input row, in input order.
    pub coords: Vec<[f64; 2]>,
    /// KL(P‖Q) after every iteration, measured with the un-exaggerated P.
    pub kl_trace: Vec<f64>,
    pub warnings: Vec<String>,
}

fn canonical_order(x: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Exact t-SNE to two dimensions.
pub fn fit_tsne(features: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult> {
    let n = features.len();
    if n < 5 {
        return Err(Error::Input(format!("t-SNE needs at least 5 points, got {n}")));
    }
    let dim = features[0].len();
    if features.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Input("t-SNE features must be finite with a common dimension".into()));
    }

    let order = canonical_order(features);
    let x: Vec<Vec<f64>> = order.iter().map(|&i| features[i].clone()).collect();
    let (p, warnings) = joint_probabilities(&x, cfg.perplexity)?;

    let normal = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(cfg.seed, "tsne-init", i as u64));
            [normal.sample(&mut rng), normal.sample(&mut rng)]
        })
        .collect();
    let mut step = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < cfg.exaggeration_iterations {
            cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < cfg.momentum_switch {
            cfg.momentum
        } else {
            cfg.final_momentum
        };
        let (q, num) = student_t_affinities(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = i * n + j;
                let m = (exaggeration * p[k] - q[k]) * num[k];
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (step[i][d] > 0.0);
                gains[i][d] = if same_sign {
                    (gains[i][d] * 0.8).max(0.01)
                } else {
                    gains[i][d] + 0.2
                };
                step[i][d] = momentum * step[i][d] - cfg.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += step[i][d];
            }
        }
        let mean = y.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        let mean = [mean[0] / n as f64, mean[1] / n as f64];
        for v in y.iter_mut() {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
        if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::EmbeddingDivergence { iteration: iter });
        }
        let (q_after, _) = student_t_affinities(&y);
        let kl = kl_divergence(&p, &q_after);
        if !kl.is_finite() {
            return Err(Error::EmbeddingDivergence { iteration: iter });
        }
        kl_trace.push(kl);
    }

    let mut coords = vec![[0.0; 2]; n];
    for (canon, &orig) in order.iter().enumerate() {
        coords[orig] = y[canon];
    }
    Ok(TsneResult {
        coords,
        kl_trace,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPoint {
    pub sample_id: String,
    pub x: f64,
    pub y: f64,
    pub dataset_label: String,
}

/// `sample_id,x,y,dataset`
pub fn write_embedding<W: Write>(points: &[EmbeddedPoint], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["sample_id", "x", "y", "dataset"])?;
    for p in points {
        w.write_record([p.sample_id.as_str(), &p.x.to_string(), &p.y.to_string(), &p.dataset_label])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_embedding<R: Read>(r: R) -> Result<Vec<EmbeddedPoint>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |c: &str| {
            c.parse::<f64>().map_err(|e| Error::Format {
                row: i + 2,
                msg: format!("bad coordinate `{c}`: {e}"),
            })
        };
        if rec.len() != 4 {
            return Err(Error::Format {
                row: i + 2,
                msg: "expected sample_id,x,y,dataset".into(),
            });
        }
        out.push(EmbeddedPoint {
            sample_id: rec[0].to_string(),
            x: num(&rec[1])?,
            y: num(&rec[2])?,
            dataset_label: rec[3].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn entropy_perplexity(p: &[f64]) -> f64 {
        let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum();
        2f64.powf(h)
    }

    #[test]
    fn simplex_vertices_share_beta() {
        let d = vec![2.0; 6];
        let a = calibrate_perplexity(&d, 3.0).unwrap();
        // all distances equal: any beta gives the uniform distribution
        assert!(a.probs.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        let b = calibrate_perplexity(&d, 3.0).unwrap();
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn five_points_perplexity_two() {
        let mut rng = seed::rng(1);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let d = squared_distances(&pts);
        for i in 0..5 {
            let others: Vec<f64> = (0..5).filter(|&j| j != i).map(|j| d[i * 5 + j]).collect();
            let c = calibrate_perplexity(&others, 2.0).unwrap();
            assert!((entropy_perplexity(&c.probs) - 2.0).abs() < 1e-3);
            assert!(c.warning.is_none());
        }
    }

    #[test]
    fn infeasible_target_is_rejected() {
        assert!(calibrate_perplexity(&[1.0, 2.0, 3.0], 4.0).is_err());
        assert!(calibrate_perplexity(&[], 1.0).is_err());
        let z = calibrate_perplexity(&[0.0, 0.0, 0.0], 2.0).unwrap();
        assert!(z.warning.is_some());
    }

    fn two_clusters(seed_: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = seed::rng(seed_);
        let mut x = Vec::new();
        let mut lab = Vec::new();
        for c in 0..2 {
            for _ in 0..25 {
                let off = c as f64 * 100.0;
                x.push((0..4).map(|_| off + rng.random::<f64>()).collect());
                lab.push(c);
            }
        }
        (x, lab)
    }

    #[test]
    fn p_and_q_are_distributions() {
        let (x, _) = two_clusters(2);
        let (p, _) = joint_probabilities(&x, 10.0).unwrap();
        let n = x.len();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(p[i * n + j], p[j * n + i]);
                assert!(p[i * n + j] >= 0.0);
            }
        }
        let cfg = TsneConfig {
            iterations: 50,
            ..Default::default()
        };
        let r = fit_tsne(&x, &cfg).unwrap();
        let (q, _) = student_t_affinities(&r.coords);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mean = r.coords.iter().fold([0.0, 0.0], |a, v| [a[0] + v[0], a[1] + v[1]]);
        assert!(mean[0].abs() < 1e-9 && mean[1].abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_permutation_equivariant() {
        let (x, _) = two_clusters(3);
        let cfg = TsneConfig {
            iterations: 300,
            perplexity: 10.0,
            ..Default::default()
        };
        let a = fit_tsne(&x, &cfg).unwrap();
        assert_eq!(a, fit_tsne(&x, &cfg).unwrap());
        let mut rev = x.clone();
        rev.reverse();
        let b = fit_tsne(&rev, &cfg).unwrap();
        let n = x.len();
        for i in 0..n {
            assert_eq!(a.coords[i], b.coords[n - 1 - i]);
        }
    }

    #[test]
    fn small_inputs_are_rejected() {
        assert!(fit_tsne(&vec![vec![0.0]; 4], &TsneConfig::default()).is_err());
        let mut x = vec![vec![0.0, 1.0]; 6];
        x[2][1] = f64::NAN;
        assert!(fit_tsne(&x, &TsneConfig::default()).is_err());
    }

    #[test]
    fn embedding_csv_round_trip() {
        let pts = vec![EmbeddedPoint {
            sample_id: "a".into(),
            x: 0.1,
            y: -2.5e-7,
            dataset_label: "NIH".into(),
        }];
        let mut buf = Vec::new();
        write_embedding(&pts, &mut buf).unwrap();
        assert_eq!(read_embedding(buf.as_slice()).unwrap(), pts);
    }
}
