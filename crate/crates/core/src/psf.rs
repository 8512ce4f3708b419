//! Per-source stochastic filtering.
//!
//! Each recovered row `x̃_n` is quantized to a binary activity guess `s̃_n`,
//! which is modelled as the output of a binary asymmetric channel (BAC)
//! driven by the two-state activity chain. Forward–backward smoothing gives
//! the posterior activity, the MAP decision keeps or nulls each sample, and
//! EM fits the chain and channel parameters when they are unknown.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ResultExt;
use crate::scenario::{check_probability, ActivationMatrix, HmmParams};
use crate::{CMatrix, Error, Result, C64};

/// Flip probabilities of the binary asymmetric channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacParams {
    /// `Pr(s̃ = 1 | s = 0)`.
    pub p_flip: f64,
    /// `Pr(s̃ = 0 | s = 1)`.
    pub q_flip: f64,
}

impl BacParams {
    pub fn new(p_flip: f64, q_flip: f64) -> Result<Self> {
        check_probability("p_flip", p_flip)?;
        check_probability("q_flip", q_flip)?;
        Ok(BacParams { p_flip, q_flip })
    }

    /// `Pr(s̃ = obs | s = state)`.
    pub fn emission(&self, state: usize, obs: u8) -> f64 {
        match (state, obs) {
            (0, 1) => self.p_flip,
            (0, _) => 1.0 - self.p_flip,
            (_, 0) => self.q_flip,
            _ => 1.0 - self.q_flip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Magnitude threshold; `s̃(t) = 1` iff `|x̃(t)| > gamma`.
    pub gamma: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { gamma: 0.5 }
    }
}

/// Row-stochastic 2×2 transition table, `rows[from][to]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub rows: [[f64; 2]; 2],
}

impl TransitionMatrix {
    pub fn from_hmm(h: &HmmParams) -> Self {
        TransitionMatrix {
            rows: [[1.0 - h.p, h.p], [h.q, 1.0 - h.q]],
        }
    }
}

/// Smoothing posteriors for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSet {
    /// `Pr(s(t) = 1 | s̃(1..T))`.
    pub marginal: Vec<f64>,
    /// `pairwise[t-1][i][j] = Pr(s(t) = i, s(t−1) = j | s̃(1..T))` for `t ≥ 1`.
    pub pairwise: Vec<[[f64; 2]; 2]>,
    /// `log Pr(s̃(1..T))`.
    pub loglik: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub init_hmm: HmmParams,
    pub init_bac: BacParams,
    pub eps: f64,
    pub max_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            init_hmm: HmmParams { p: 0.5, q: 0.5 },
            init_bac: BacParams {
                p_flip: 0.1,
                q_flip: 0.2,
            },
            eps: 1e-5,
            max_iters: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub hmm: HmmParams,
    pub bac: BacParams,
    pub posteriors: PosteriorSet,
    /// Log-likelihood at the parameters used by each E-step.
    pub loglik_trace: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

/// Estimates are kept inside `[EM_CLAMP, 1 − EM_CLAMP]`.
pub const EM_CLAMP: f64 = 1e-6;

pub fn quantize_states(x_row: &[C64], gamma: f64) -> Result<Vec<u8>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Parameter(format!("gamma = {gamma} must be finite and > 0")));
    }
    Ok(x_row.iter().map(|z| (z.norm() > gamma) as u8).collect())
}

/// Forward–backward smoothing with the chain started from its stationary
/// distribution.
pub fn forward_backward(s_tilde: &[u8], hmm: &HmmParams, bac: &BacParams) -> Result<PosteriorSet> {
    hmm.validate()?;
    let prior = hmm.stationary_active();
    forward_backward_with_prior(s_tilde, hmm, bac, prior)
}

/// Forward–backward with an explicit `Pr(s(1) = 1)`.
pub fn forward_backward_with_prior(
    s_tilde: &[u8],
    hmm: &HmmParams,
    bac: &BacParams,
    prior_active: f64,
) -> Result<PosteriorSet> {
    check_probability("p", hmm.p)?;
    check_probability("q", hmm.q)?;
    check_probability("p_flip", bac.p_flip)?;
    check_probability("q_flip", bac.q_flip)?;
    check_probability("initial prior", prior_active)?;
    let len = s_tilde.len();
    if len == 0 {
        return Ok(PosteriorSet {
            marginal: Vec::new(),
            pairwise: Vec::new(),
            loglik: 0.0,
        });
    }
    let phi = TransitionMatrix::from_hmm(hmm).rows;

    // Normalized forward messages: alpha[t][k] = Pr(s(t)=k | s̃(1..t)).
    let mut alpha = vec![[0.0; 2]; len];
    let mut scale = vec![0.0; len];
    let mut loglik = 0.0;
    for t in 0..len {
        let pred = if t == 0 {
            [1.0 - prior_active, prior_active]
        } else {
            let a = alpha[t - 1];
            [
                a[0] * phi[0][0] + a[1] * phi[1][0],
                a[0] * phi[0][1] + a[1] * phi[1][1],
            ]
        };
        let un = [
            pred[0] * bac.emission(0, s_tilde[t]),
            pred[1] * bac.emission(1, s_tilde[t]),
        ];
        let c = un[0] + un[1];
        if !(c > 0.0) {
            return Err(Error::ModelMismatch { t });
        }
        scale[t] = c;
        loglik += c.ln();
        alpha[t] = [un[0] / c, un[1] / c];
    }

    // Backward messages scaled by the same constants:
    // beta[t][k] = Pr(s̃(t+1..T) | s(t)=k) / Π_{u>t} c_u.
    let mut beta = vec![[1.0; 2]; len];
    for t in (0..len - 1).rev() {
        let e = [bac.emission(0, s_tilde[t + 1]), bac.emission(1, s_tilde[t + 1])];
        let nb = beta[t + 1];
        for (j, row) in phi.iter().enumerate() {
            beta[t][j] = (row[0] * e[0] * nb[0] + row[1] * e[1] * nb[1]) / scale[t + 1];
        }
    }

    let marginal: Vec<f64> = (0..len)
        .map(|t| {
            let g0 = alpha[t][0] * beta[t][0];
            let g1 = alpha[t][1] * beta[t][1];
            (g1 / (g0 + g1)).clamp(0.0, 1.0)
        })
        .collect();

    let pairwise = (1..len)
        .map(|t| {
            let mut table = [[0.0; 2]; 2];
            let mut total = 0.0;
            for (i, row) in table.iter_mut().enumerate() {
                let e = bac.emission(i, s_tilde[t]);
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = alpha[t - 1][j] * phi[j][i] * e * beta[t][i];
                    total += *cell;
                }
            }
            for row in table.iter_mut() {
                for cell in row.iter_mut() {
                    *cell /= total;
                }
            }
            table
        })
        .collect();

    Ok(PosteriorSet {
        marginal,
        pairwise,
        loglik,
    })
}

/// `ŝ(t) = 1` iff the posterior exceeds one half; ties go to inactive.
pub fn map_smooth(posteriors: &PosteriorSet) -> Vec<u8> {
    posteriors.marginal.iter().map(|&m| (m > 0.5) as u8).collect()
}

pub fn null_signals(x_row: &[C64], s_hat: &[u8]) -> Result<Vec<C64>> {
    if x_row.len() != s_hat.len() {
        return Err(Error::Dimension(format!(
            "signal row of length {} with mask of length {}",
            x_row.len(),
            s_hat.len()
        )));
    }
    Ok(x_row
        .iter()
        .zip(s_hat)
        .map(|(&x, &s)| if s == 1 { x } else { C64::new(0.0, 0.0) })
        .collect())
}

fn clamp_prob(v: f64) -> f64 {
    v.clamp(EM_CLAMP, 1.0 - EM_CLAMP)
}

/// Baum–Welch for the activity chain and the BAC flips.
///
/// The initial-state probability is re-estimated alongside the four model
/// parameters so that each iteration is a true EM step.
pub fn em_fit(s_tilde: &[u8], cfg: &EmConfig) -> Result<EmFit> {
    if s_tilde.len() < 2 {
        return Err(Error::Parameter("EM needs at least two observations".into()));
    }
    if !(cfg.eps > 0.0) {
        return Err(Error::Parameter("EM eps must be > 0".into()));
    }
    cfg.init_hmm.validate()?;
    BacParams::new(cfg.init_bac.p_flip, cfg.init_bac.q_flip)?;

    let mut hmm = HmmParams {
        p: clamp_prob(cfg.init_hmm.p),
        q: clamp_prob(cfg.init_hmm.q),
    };
    let mut bac = BacParams {
        p_flip: clamp_prob(cfg.init_bac.p_flip),
        q_flip: clamp_prob(cfg.init_bac.q_flip),
    };
    let mut prior = clamp_prob(hmm.stationary_active());
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    while iters < cfg.max_iters {
        let post = forward_backward_with_prior(s_tilde, &hmm, &bac, prior)?;
        trace.push(post.loglik);

        let (mut n01, mut n0, mut n10, mut n1) = (0.0, 0.0, 0.0, 0.0);
        for table in &post.pairwise {
            // table[i][j]: s(t)=i, s(t−1)=j.
            n01 += table[1][0];
            n0 += table[0][0] + table[1][0];
            n10 += table[0][1];
            n1 += table[0][1] + table[1][1];
        }
        let (mut flip01, mut inactive, mut flip10, mut active) = (0.0, 0.0, 0.0, 0.0);
        for (&m, &obs) in post.marginal.iter().zip(s_tilde) {
            inactive += 1.0 - m;
            active += m;
            if obs == 1 {
                flip01 += 1.0 - m;
            } else {
                flip10 += m;
            }
        }
        let ratio = |num: f64, den: f64, old: f64| if den > 0.0 { clamp_prob(num / den) } else { old };
        let next_hmm = HmmParams {
            p: ratio(n01, n0, hmm.p),
            q: ratio(n10, n1, hmm.q),
        };
        let next_bac = BacParams {
            p_flip: ratio(flip01, inactive, bac.p_flip),
            q_flip: ratio(flip10, active, bac.q_flip),
        };
        prior = clamp_prob(post.marginal[0]);
        iters += 1;

        let delta = (next_hmm.p - hmm.p)
            .abs()
            .max((next_hmm.q - hmm.q).abs())
            .max((next_bac.p_flip - bac.p_flip).abs())
            .max((next_bac.q_flip - bac.q_flip).abs());
        hmm = next_hmm;
        bac = next_bac;
        if delta < cfg.eps {
            converged = true;
            break;
        }
    }

    let posteriors = forward_backward_with_prior(s_tilde, &hmm, &bac, prior)?;
    trace.push(posteriors.loglik);
    Ok(EmFit {
        hmm,
        bac,
        posteriors,
        loglik_trace: trace,
        iters,
        converged,
    })
}

/// Whether the filter knows the model or has to fit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PsfMode {
    Known { hmm: Vec<HmmParams>, bac: BacParams },
    Unknown { em: EmConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedParams {
    pub hmm: HmmParams,
    pub bac: BacParams,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct PsfOutput {
    pub signal: CMatrix,
    pub states: ActivationMatrix,
    /// Raw quantized states before smoothing.
    pub quantized: ActivationMatrix,
    /// Per-source parameters used by the smoother (fitted in unknown mode).
    pub params: Vec<FittedParams>,
}

/// Quantize, (fit), smooth, decide and null each source row independently.
pub fn psf_pipeline(x_tilde: &CMatrix, quantizer: &QuantizerConfig, mode: &PsfMode) -> Result<PsfOutput> {
    let n = x_tilde.nrows();
    if let PsfMode::Known { hmm, .. } = mode {
        if hmm.len() != n && hmm.len() != 1 {
            return Err(Error::Parameter(format!(
                "{} HMM parameter sets for {n} sources",
                hmm.len()
            )));
        }
    }
    let rows: Vec<(Vec<u8>, Vec<u8>, Vec<C64>, FittedParams)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<C64> = x_tilde.row(i).iter().cloned().collect();
            let s_tilde = quantize_states(&row, quantizer.gamma)?;
            let (post, params) = match mode {
                PsfMode::Known { hmm, bac } => {
                    let h = if hmm.len() == 1 { hmm[0] } else { hmm[i] };
                    (
                        forward_backward(&s_tilde, &h, bac)?,
                        FittedParams {
                            hmm: h,
                            bac: *bac,
                            converged: true,
                        },
                    )
                }
                PsfMode::Unknown { em } => {
                    let fit = em_fit(&s_tilde, em)?;
                    let post = forward_backward(&s_tilde, &fit.hmm, &fit.bac)?;
                    (
                        post,
                        FittedParams {
                            hmm: fit.hmm,
                            bac: fit.bac,
                            converged: fit.converged,
                        },
                    )
                }
            };
            let s_hat = map_smooth(&post);
            let x_hat = null_signals(&row, &s_hat)?;
            Ok((s_tilde, s_hat, x_hat, params))
        })
        .map(|r: Result<_>| r)
        .enumerate()
        .map(|(i, r)| r.context_with(|| format!("source {i}")))
        .collect::<Result<_>>()?;

    let t_len = x_tilde.ncols();
    let mut signal = CMatrix::zeros(n, t_len);
    let mut quantized = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for (i, (s_tilde, s_hat, x_hat, p)) in rows.into_iter().enumerate() {
        for (t, v) in x_hat.into_iter().enumerate() {
            signal[(i, t)] = v;
        }
        quantized.push(s_tilde);
        states.push(s_hat);
        params.push(p);
    }
    let empty = |rows: Vec<Vec<u8>>| {
        if n == 0 {
            Ok(ActivationMatrix::zeros(0, t_len))
        } else {
            ActivationMatrix::from_rows(rows)
        }
    };
    Ok(PsfOutput {
        signal,
        states: empty(states)?,
        quantized: empty(quantized)?,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{sample_activation, ScenarioConfig, SourceHmm};
    use crate::{derive_seed, rng_from_seed};
    use proptest::prelude::*;
    use rand::Rng;

    /// Exhaustive Bayes over all 2^T state paths.
    fn brute_force(s: &[u8], hmm: &HmmParams, bac: &BacParams) -> (Vec<f64>, Vec<[[f64; 2]; 2]>, f64) {
        let len = s.len();
        let phi = TransitionMatrix::from_hmm(hmm).rows;
        let pi1 = hmm.stationary_active();
        let mut marg = vec![0.0; len];
        let mut pair = vec![[[0.0; 2]; 2]; len.saturating_sub(1)];
        let mut total = 0.0;
        for path in 0u32..(1 << len) {
            let st = |t: usize| ((path >> t) & 1) as usize;
            let mut w = if st(0) == 1 { pi1 } else { 1.0 - pi1 };
            w *= bac.emission(st(0), s[0]);
            for t in 1..len {
                w *= phi[st(t - 1)][st(t)] * bac.emission(st(t), s[t]);
            }
            total += w;
            for t in 0..len {
                if st(t) == 1 {
                    marg[t] += w;
                }
                if t > 0 {
                    pair[t - 1][st(t)][st(t - 1)] += w;
                }
            }
        }
        for m in marg.iter_mut() {
            *m /= total;
        }
        for tab in pair.iter_mut() {
            for row in tab.iter_mut() {
                for c in row.iter_mut() {
                    *c /= total;
                }
            }
        }
        (marg, pair, total.ln())
    }

    #[test]
    fn quantizer_uses_strict_threshold() {
        let row = [C64::new(0.4, 0.0), C64::new(0.0, 0.6), C64::new(-0.5, 0.0)];
        assert_eq!(quantize_states(&row, 0.5).unwrap(), vec![0, 1, 0]);
        assert_eq!(quantize_states(&[C64::new(0.0, 0.0); 4], 0.5).unwrap(), vec![0; 4]);
        assert!(quantize_states(&row, 0.0).is_err());
    }

    #[test]
    fn noiseless_channel_reproduces_observations() {
        let s = [0, 1, 1, 0, 1, 0, 0];
        let post = forward_backward(&s, &HmmParams { p: 0.2, q: 0.3 }, &BacParams { p_flip: 0.0, q_flip: 0.0 }).unwrap();
        for (m, &o) in post.marginal.iter().zip(&s) {
            assert!((m - o as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn uninformative_model_gives_one_half() {
        let s = [1, 0, 0, 1, 1];
        let post = forward_backward(&s, &HmmParams { p: 0.5, q: 0.5 }, &BacParams { p_flip: 0.5, q_flip: 0.5 }).unwrap();
        assert!(post.marginal.iter().all(|m| (m - 0.5).abs() < 1e-12));
        assert_eq!(map_smooth(&post), vec![0; 5]);
    }

    #[test]
    fn matches_enumeration_on_length_eight() {
        let s = [0, 1, 1, 0, 1, 1, 1, 0];
        let hmm = HmmParams { p: 0.2, q: 0.3 };
        let bac = BacParams { p_flip: 0.1, q_flip: 0.2 };
        let post = forward_backward(&s, &hmm, &bac).unwrap();
        let (marg, pair, ll) = brute_force(&s, &hmm, &bac);
        for t in 0..8 {
            assert!((post.marginal[t] - marg[t]).abs() < 1e-10);
        }
        for t in 0..7 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((post.pairwise[t][i][j] - pair[t][i][j]).abs() < 1e-10);
                }
            }
        }
        assert!((post.loglik - ll).abs() < 1e-10);
        let brute_map: Vec<u8> = marg.iter().map(|&m| (m > 0.5) as u8).collect();
        assert_eq!(map_smooth(&post), brute_map);
    }

    #[test]
    fn impossible_observation_is_model_mismatch() {
        // p_flip = 0 and p = 0 with an inactive prior: an observed 1 cannot happen.
        let hmm = HmmParams { p: 0.0, q: 1.0 };
        let bac = BacParams { p_flip: 0.0, q_flip: 0.0 };
        assert!(matches!(
            forward_backward(&[0, 1], &hmm, &bac),
            Err(Error::ModelMismatch { t: 1 })
        ));
    }

    #[test]
    fn map_smooth_ties_go_inactive() {
        let post = PosteriorSet {
            marginal: vec![0.9, 0.1, 0.5],
            pairwise: vec![],
            loglik: 0.0,
        };
        assert_eq!(map_smooth(&post), vec![1, 0, 0]);
        let ones = PosteriorSet {
            marginal: vec![1.0; 4],
            pairwise: vec![],
            loglik: 0.0,
        };
        assert_eq!(map_smooth(&ones), vec![1; 4]);
    }

    #[test]
    fn nulling_follows_mask() {
        let x: Vec<C64> = (0..5).map(|i| C64::new(i as f64 + 1.0, -1.0)).collect();
        assert_eq!(null_signals(&x, &[1; 5]).unwrap(), x);
        assert!(null_signals(&x, &[0; 5]).unwrap().iter().all(|z| *z == C64::new(0.0, 0.0)));
        let mask = [1, 0, 1, 1, 0];
        let out = null_signals(&x, &mask).unwrap();
        for t in 0..5 {
            assert_eq!(out[t], if mask[t] == 1 { x[t] } else { C64::new(0.0, 0.0) });
        }
        assert!(null_signals(&x, &[1; 4]).is_err());
    }

    fn bac_observe(states: &[u8], bac: &BacParams, seed: u64) -> Vec<u8> {
        let mut rng = rng_from_seed(seed);
        states
            .iter()
            .map(|&s| {
                let u: f64 = rng.random();
                match s {
                    0 => (u < bac.p_flip) as u8,
                    _ => (u >= bac.q_flip) as u8,
                }
            })
            .collect()
    }

    #[test]
    fn em_loglik_is_monotone_from_default_initialization() {
        let truth = HmmParams { p: 0.02, q: 0.05 };
        let cfg = ScenarioConfig {
            n_sources: 1,
            horizon: 3000,
            hmm: SourceHmm::Shared(truth),
            seed: 4,
            ..ScenarioConfig::default()
        };
        let act = sample_activation(&cfg).unwrap();
        let obs = bac_observe(act.row(0), &BacParams { p_flip: 0.03, q_flip: 0.2 }, 5);
        let fit = em_fit(&obs, &EmConfig::default()).unwrap();
        assert!(fit.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", fit.loglik_trace);
        assert!(fit.iters >= 1);
    }

    #[test]
    fn em_rejects_short_sequences() {
        assert!(em_fit(&[1], &EmConfig::default()).is_err());
    }

    #[test]
    fn em_reports_non_convergence_without_failing() {
        let obs: Vec<u8> = (0..200).map(|t| ((t / 7) % 2) as u8).collect();
        let cfg = EmConfig {
            max_iters: 2,
            eps: 1e-12,
            ..EmConfig::default()
        };
        let fit = em_fit(&obs, &cfg).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iters, 2);
    }

    #[test]
    fn pipeline_with_noiseless_bac_keeps_quantized_support() {
        let mut rng = rng_from_seed(3);
        let x = CMatrix::from_fn(3, 40, |_, _| C64::new(rng.random::<f64>() - 0.5, 0.0) * 2.0);
        let mode = PsfMode::Known {
            hmm: vec![HmmParams { p: 0.1, q: 0.1 }],
            bac: BacParams { p_flip: 0.0, q_flip: 0.0 },
        };
        let out = psf_pipeline(&x, &QuantizerConfig { gamma: 0.5 }, &mode).unwrap();
        assert_eq!(out.states, out.quantized);
        for i in 0..3 {
            for t in 0..40 {
                assert_eq!(out.signal[(i, t)] != C64::new(0.0, 0.0), out.states.get(i, t) == 1);
            }
        }
    }

    #[test]
    fn pipeline_wrong_parameter_count_is_an_error() {
        let x = CMatrix::zeros(3, 10);
        let mode = PsfMode::Known {
            hmm: vec![HmmParams { p: 0.1, q: 0.1 }; 2],
            bac: BacParams { p_flip: 0.1, q_flip: 0.1 },
        };
        assert!(psf_pipeline(&x, &QuantizerConfig::default(), &mode).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn forward_backward_equals_enumeration(
            seed in any::<u64>(),
            len in 1usize..=12,
            p in 0.01f64..0.99, q in 0.01f64..0.99,
            pf in 0.0f64..0.6, qf in 0.0f64..0.6,
        ) {
            let mut rng = rng_from_seed(derive_seed(seed, &[1]));
            let s: Vec<u8> = (0..len).map(|_| rng.random::<bool>() as u8).collect();
            let hmm = HmmParams { p, q };
            let bac = BacParams { p_flip: pf, q_flip: qf };
            let post = forward_backward(&s, &hmm, &bac).unwrap();
            let (marg, pair, ll) = brute_force(&s, &hmm, &bac);
            for t in 0..len {
                prop_assert!((post.marginal[t] - marg[t]).abs() <= 1e-10);
                prop_assert!((0.0..=1.0).contains(&post.marginal[t]));
            }
            prop_assert!((post.loglik - ll).abs() <= 1e-10 * ll.abs().max(1.0));
            for t in 1..len {
                let tab = post.pairwise[t - 1];
                let total: f64 = tab.iter().flatten().sum();
                prop_assert!((total - 1.0).abs() <= 1e-10);
                // Summing out s(t−1) gives Pr(s(t)=1); summing out s(t) gives Pr(s(t−1)=1).
                prop_assert!((tab[1][0] + tab[1][1] - post.marginal[t]).abs() <= 1e-10);
                prop_assert!((tab[0][1] + tab[1][1] - post.marginal[t - 1]).abs() <= 1e-10);
                for i in 0..2 { for j in 0..2 {
                    prop_assert!((tab[i][j] - pair[t - 1][i][j]).abs() <= 1e-10);
                }}
            }
        }

        #[test]
        fn transition_rows_sum_to_one(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            let m = TransitionMatrix::from_hmm(&HmmParams { p, q });
            for row in m.rows {
                prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn nulled_support_within_mask(seed in any::<u64>(), len in 0usize..50) {
            let mut rng = rng_from_seed(seed);
            let x: Vec<C64> = (0..len).map(|_| C64::new(rng.random(), rng.random())).collect();
            let mask: Vec<u8> = (0..len).map(|_| rng.random::<bool>() as u8).collect();
            let out = null_signals(&x, &mask).unwrap();
            for t in 0..len {
                prop_assert!(out[t] == C64::new(0.0, 0.0) || mask[t] == 1);
            }
        }
    }
}
