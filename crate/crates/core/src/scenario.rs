//! Ground-truth generation: Markov activity, source symbols, fading channel
//! and noisy sensor observations `Y = HX + Z`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{complex_normal, random_complex_matrix};
use crate::{derive_seed, rng_from_seed, CMatrix, Error, Result, C64};

/// Transition probabilities of the two-state activity chain.
///
/// `p` is the per-symbol probability of switching on, `q` of switching off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub p: f64,
    pub q: f64,
}

impl HmmParams {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        let params = HmmParams { p, q };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        check_probability("p", self.p)?;
        check_probability("q", self.q)?;
        if self.p + self.q <= 0.0 {
            return Err(Error::Parameter(
                "p + q must be positive for a stationary distribution".into(),
            ));
        }
        Ok(())
    }

    /// Stationary probability of the active state, `p / (p + q)`.
    pub fn stationary_active(&self) -> f64 {
        self.p / (self.p + self.q)
    }
}

pub(crate) fn check_probability(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(Error::Parameter(format!("{name} = {v} is not a probability")));
    }
    Ok(())
}

/// Either one parameter pair shared by every source or one pair per source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceHmm {
    Shared(HmmParams),
    PerSource(Vec<HmmParams>),
}

impl SourceHmm {
    pub fn for_source(&self, n: usize) -> HmmParams {
        match self {
            SourceHmm::Shared(h) => *h,
            SourceHmm::PerSource(v) => v[n],
        }
    }

    pub fn validate(&self, n_sources: usize) -> Result<()> {
        match self {
            SourceHmm::Shared(h) => h.validate(),
            SourceHmm::PerSource(v) => {
                if v.len() != n_sources {
                    return Err(Error::Parameter(format!(
                        "{} per-source HMM entries for {} sources",
                        v.len(),
                        n_sources
                    )));
                }
                v.iter().try_for_each(HmmParams::validate)
            }
        }
    }

    /// Expected number of simultaneously active sources.
    pub fn expected_active(&self, n_sources: usize) -> f64 {
        (0..n_sources)
            .map(|n| self.for_source(n).stationary_active())
            .sum()
    }
}

impl From<HmmParams> for SourceHmm {
    fn from(h: HmmParams) -> Self {
        SourceHmm::Shared(h)
    }
}

/// Binary on/off states, `N` rows by `T` columns, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationMatrix {
    n_sources: usize,
    horizon: usize,
    states: Vec<u8>,
}

impl ActivationMatrix {
    pub fn zeros(n_sources: usize, horizon: usize) -> Self {
        ActivationMatrix {
            n_sources,
            horizon,
            states: vec![0; n_sources * horizon],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let n_sources = rows.len();
        let horizon = rows.first().map_or(0, Vec::len);
        let mut states = Vec::with_capacity(n_sources * horizon);
        for (n, row) in rows.into_iter().enumerate() {
            if row.len() != horizon {
                return Err(Error::Dimension(format!(
                    "activation row {n} has length {} (expected {horizon})",
                    row.len()
                )));
            }
            if let Some(&bad) = row.iter().find(|&&s| s > 1) {
                return Err(Error::Parameter(format!("activation state {bad} is not binary")));
            }
            states.extend(row);
        }
        Ok(ActivationMatrix {
            n_sources,
            horizon,
            states,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn row(&self, n: usize) -> &[u8] {
        &self.states[n * self.horizon..(n + 1) * self.horizon]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [u8] {
        &mut self.states[n * self.horizon..(n + 1) * self.horizon]
    }

    pub fn get(&self, n: usize, t: usize) -> u8 {
        self.states[n * self.horizon + t]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.states.chunks(self.horizon.max(1)).take(self.n_sources)
    }

    pub fn active_count(&self) -> usize {
        self.states.iter().map(|&s| s as usize).sum()
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let rows = perm.iter().map(|&j| self.row(j).to_vec()).collect();
        ActivationMatrix::from_rows(rows).expect("permuted rows keep their shape")
    }

    pub fn to_complex(&self) -> CMatrix {
        CMatrix::from_fn(self.n_sources, self.horizon, |n, t| C64::from(self.get(n, t) as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SignalDistribution {
    /// Real `N(0, 1)` symbols.
    #[default]
    UnitGaussian,
    /// Equiprobable `±1`.
    Bpsk,
}

/// Source symbols, `N × T`. Zero wherever the source is inactive.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalMatrix {
    pub values: CMatrix,
}

impl SignalMatrix {
    pub fn n_sources(&self) -> usize {
        self.values.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, n: usize) -> Vec<C64> {
        self.values.row(n).iter().cloned().collect()
    }
}

/// Mixing matrix `H`, `M × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    pub values: CMatrix,
}

/// Sensor data `Y`, `M × T`, with the noise variance used to draw it.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub values: CMatrix,
    pub noise_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_sources: usize,
    pub n_sensors: usize,
    pub horizon: usize,
    /// Per-source, per-sample SNR in dB; the noise variance is `10^(-snr/10)`.
    pub snr_db: f64,
    /// Drop the noise entirely (infinite SNR).
    pub noiseless: bool,
    pub hmm: SourceHmm,
    pub dist: SignalDistribution,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_sources: 30,
            n_sensors: 20,
            horizon: 1000,
            snr_db: 30.0,
            noiseless: false,
            hmm: SourceHmm::Shared(HmmParams { p: 0.0022, q: 0.02 }),
            dist: SignalDistribution::UnitGaussian,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources < 1 || self.n_sensors < 1 {
            return Err(Error::Parameter("need at least one source and one sensor".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Parameter(format!("horizon {} < 2", self.horizon)));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Parameter("snr_db is NaN".into()));
        }
        self.hmm.validate(self.n_sources)
    }

    pub fn noise_variance(&self) -> f64 {
        if self.noiseless {
            0.0
        } else {
            noise_variance(self.snr_db)
        }
    }
}

/// Noise variance for unit-power symbols and unit-norm channel columns.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// One fully drawn realization of the signal model.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub activation: ActivationMatrix,
    pub signals: SignalMatrix,
    pub channel: ChannelMatrix,
    pub observations: ObservationSet,
}

// Substream tags; each stage derives its seed from the scenario seed.
const STREAM_SIGNALS: u64 = 1;
const STREAM_CHANNEL: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// Draws activity, symbols, channel and observations for `cfg`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let activation = sample_activation(cfg)?;
    let signals = sample_signals(&activation, cfg.dist, derive_seed(cfg.seed, &[STREAM_SIGNALS]));
    let channel = sample_channel(
        cfg.n_sensors,
        cfg.n_sources,
        derive_seed(cfg.seed, &[STREAM_CHANNEL]),
    )?;
    let snr = if cfg.noiseless { f64::INFINITY } else { cfg.snr_db };
    let observations = synthesize_observations(
        &channel,
        &signals,
        snr,
        derive_seed(cfg.seed, &[STREAM_NOISE]),
    )?;
    Ok(Scenario {
        activation,
        signals,
        channel,
        observations,
    })
}

/// Independent two-state Markov chains, one per source, each started from
/// its stationary distribution.
pub fn sample_activation(cfg: &ScenarioConfig) -> Result<ActivationMatrix> {
    cfg.hmm.validate(cfg.n_sources)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut act = ActivationMatrix::zeros(cfg.n_sources, cfg.horizon);
    for n in 0..cfg.n_sources {
        let h = cfg.hmm.for_source(n);
        let row = act.row_mut(n);
        let mut state = rng.random::<f64>() < h.stationary_active();
        for slot in row.iter_mut() {
            *slot = state as u8;
            let flip = if state { h.q } else { h.p };
            if rng.random::<f64>() < flip {
                state = !state;
            }
        }
    }
    Ok(act)
}

pub fn sample_signals(act: &ActivationMatrix, dist: SignalDistribution, seed: u64) -> SignalMatrix {
    let mut rng = rng_from_seed(seed);
    let mut values = CMatrix::zeros(act.n_sources(), act.horizon());
    for n in 0..act.n_sources() {
        for (t, &s) in act.row(n).iter().enumerate() {
            if s == 1 {
                let v = match dist {
                    SignalDistribution::UnitGaussian => rng.sample::<f64, _>(StandardNormal),
                    SignalDistribution::Bpsk => {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                values[(n, t)] = C64::from(v);
            }
        }
    }
    SignalMatrix { values }
}

/// I.i.d. circular complex Gaussian entries, columns scaled to unit norm.
pub fn sample_channel(n_sensors: usize, n_sources: usize, seed: u64) -> Result<ChannelMatrix> {
    if n_sensors < 1 || n_sources < 1 {
        return Err(Error::Parameter("channel needs M, N >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut values = random_complex_matrix(n_sensors, n_sources, &mut rng);
    for mut col in values.column_iter_mut() {
        let norm = col.norm();
        col /= C64::from(norm);
    }
    Ok(ChannelMatrix { values })
}

/// `Y = HX + Z` with `Z` i.i.d. `CN(0, σ²)`, `σ² = 10^(-snr_db/10)`.
pub fn synthesize_observations(
    h: &ChannelMatrix,
    x: &SignalMatrix,
    snr_db: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if h.values.ncols() != x.values.nrows() {
        return Err(Error::Dimension(format!(
            "channel has {} columns but signal has {} rows",
            h.values.ncols(),
            x.values.nrows()
        )));
    }
    let noise_variance = noise_variance(snr_db);
    let mut values = &h.values * &x.values;
    if noise_variance > 0.0 {
        let sigma = noise_variance.sqrt();
        let mut rng = rng_from_seed(seed);
        for j in 0..values.ncols() {
            for i in 0..values.nrows() {
                values[(i, j)] += complex_normal(&mut rng) * sigma;
            }
        }
    }
    Ok(ObservationSet {
        values,
        noise_variance,
    })
}
