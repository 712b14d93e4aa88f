//! Adaptive server selection within a mirrored server set.
//!
//! Each broker owns one [`Selector`] and keeps per-server statistics from its
//! own traffic only: the in-flight count, an EMA of response latency and an
//! EMA of the in-flight depth seen at dispatch time. Servers are scored as
//!
//! ```text
//! inflight scorer  : inflight
//! latency scorer   : latency_ema
//! hybrid scorer    : (inflight + queue_ema + 1)^N * latency_ema
//! ```
//!
//! and picked either by argmin or by softmax sampling over `-score / tau`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand_core::RngCore;

/// Smallest temperature used by softmax selection.
pub const TAU_EPSILON: f64 = 1e-9;

/// `x <- alpha * obs + (1 - alpha) * x`.
pub fn ema(prev: f64, obs: f64, alpha: f64) -> f64 {
    alpha * obs + (1.0 - alpha) * prev
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
pub struct SelectorParams {
    pub alpha: f64,
    pub exponent: f64,
    pub latency_prior_ms: f64,
}

impl Default for SelectorParams {
    fn default() -> Self {
        Self {
            alpha: 2.0 / 3.0,
            exponent: 3.0,
            latency_prior_ms: 1.0,
        }
    }
}

impl SelectorParams {
    pub fn validate(&self) -> Result<(), SelectorError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(SelectorError::InvalidAlpha(self.alpha));
        }
        if !(self.exponent >= 0.0 && self.exponent.is_finite()) {
            return Err(SelectorError::InvalidExponent(self.exponent));
        }
        if !(self.latency_prior_ms >= 0.0 && self.latency_prior_ms.is_finite()) {
            return Err(SelectorError::InvalidPrior(self.latency_prior_ms));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ServerStats {
    pub inflight: u32,
    pub latency_ema: f64,
    pub queue_ema: f64,
}

impl ServerStats {
    pub fn new(latency_prior_ms: f64) -> Self {
        Self {
            inflight: 0,
            latency_ema: latency_prior_ms,
            queue_ema: 0.0,
        }
    }

    pub fn on_dispatch(&mut self, alpha: f64) {
        self.queue_ema = ema(self.queue_ema, f64::from(self.inflight), alpha);
        self.inflight += 1;
    }

    /// Returns `false` when there was no outstanding dispatch to match.
    pub fn on_response(&mut self, latency_ms: f64, alpha: f64) -> bool {
        let matched = self.inflight > 0;
        self.inflight = self.inflight.saturating_sub(1);
        self.latency_ema = ema(self.latency_ema, latency_ms, alpha);
        matched
    }

    pub fn score(&self, scorer: Scorer, exponent: f64) -> f64 {
        match scorer {
            Scorer::RoundRobin => 0.0,
            Scorer::Inflight => f64::from(self.inflight),
            Scorer::LatencyEma => self.latency_ema,
            Scorer::Hybrid => {
                let q = f64::from(self.inflight) + self.queue_ema + 1.0;
                libm::pow(q, exponent) * self.latency_ema
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Scorer {
    RoundRobin,
    Inflight,
    LatencyEma,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Mode {
    Argmin,
    Softmax,
}

/// How the softmax temperature is derived from the scores of one selection.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum TauRule {
    /// `tau = max(max score, eps)`; every exponent lies in `[-1, 0]`.
    MaxScore,
    /// `tau = max(min score, eps) / sharpness`; weights depend only on score
    /// ratios, so a server scoring `k` times the best gets weight
    /// `exp(-sharpness * (k - 1))` relative to it.
    MinScore { sharpness: f64 },
}

impl Default for TauRule {
    fn default() -> Self {
        TauRule::MinScore { sharpness: 4.0 }
    }
}

impl TauRule {
    pub fn tau(&self, scores: &[f64]) -> f64 {
        match *self {
            TauRule::MaxScore => scores.iter().copied().fold(0.0, f64::max).max(TAU_EPSILON),
            TauRule::MinScore { sharpness } => {
                let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
                min.max(TAU_EPSILON) / sharpness
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct SelectionPolicy {
    pub scorer: Scorer,
    #[cfg_attr(feature = "serde", serde(default = "default_mode"))]
    pub mode: Mode,
    #[cfg_attr(feature = "serde", serde(default))]
    pub tau_rule: TauRule,
}

#[cfg(feature = "serde")]
fn default_mode() -> Mode {
    Mode::Argmin
}

impl SelectionPolicy {
    pub const ROUND_ROBIN: Self = Self::argmin(Scorer::RoundRobin);
    pub const INFLIGHT: Self = Self::argmin(Scorer::Inflight);
    pub const LATENCY_EMA: Self = Self::argmin(Scorer::LatencyEma);
    pub const HYBRID: Self = Self::argmin(Scorer::Hybrid);

    pub const fn argmin(scorer: Scorer) -> Self {
        Self {
            scorer,
            mode: Mode::Argmin,
            tau_rule: TauRule::MaxScore,
        }
    }

    pub const fn softmax(scorer: Scorer, tau_rule: TauRule) -> Self {
        Self {
            scorer,
            mode: Mode::Softmax,
            tau_rule,
        }
    }

    pub fn validate(&self) -> Result<(), SelectorError> {
        if let TauRule::MinScore { sharpness } = self.tau_rule {
            if !(sharpness > 0.0 && sharpness.is_finite()) {
                return Err(SelectorError::InvalidSharpness(sharpness));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectorError {
    #[error("no eligible server in the mirrored server set")]
    NoEligibleServer,
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("exponent must be finite and non-negative, got {0}")]
    InvalidExponent(f64),
    #[error("latency prior must be finite and non-negative, got {0}")]
    InvalidPrior(f64),
    #[error("softmax sharpness must be finite and positive, got {0}")]
    InvalidSharpness(f64),
}

/// Non-fatal findings surfaced to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorLint {
    /// A zero latency prior makes a fresh server score 0 and attract every
    /// query until its first response arrives.
    ZeroLatencyPrior,
    /// A response arrived with no outstanding dispatch.
    UnmatchedResponse,
}

/// Softmax probabilities over `scores`. Lower score, higher probability.
pub fn softmax_probabilities(scores: &[f64], rule: TauRule) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let tau = rule.tau(scores);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = scores.iter().map(|s| libm::exp(-(s - min) / tau)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Uniform draw in `[0, 1)` from 53 random bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Outcome of one selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    /// Position in the supplied server list.
    pub index: usize,
    /// Servers scored to make the choice; never more than the list length.
    pub evaluated: usize,
}

/// One broker's selection state for every ⟨table, server⟩ key it routes to.
#[derive(Debug, Clone)]
pub struct Selector<K> {
    params: SelectorParams,
    stats: BTreeMap<K, ServerStats>,
    rr_cursor: BTreeMap<usize, usize>,
    unmatched_responses: u64,
}

impl<K: Ord + Clone> Selector<K> {
    pub fn new(params: SelectorParams) -> Self {
        Self {
            params,
            stats: BTreeMap::new(),
            rr_cursor: BTreeMap::new(),
            unmatched_responses: 0,
        }
    }

    pub fn params(&self) -> &SelectorParams {
        &self.params
    }

    pub fn stats(&self, key: &K) -> Option<&ServerStats> {
        self.stats.get(key)
    }

    pub fn unmatched_responses(&self) -> u64 {
        self.unmatched_responses
    }

    /// Registers `key` with the given latency prior. Re-registration keeps
    /// the existing statistics.
    pub fn register_server(&mut self, key: K, latency_prior_ms: f64) -> Option<SelectorLint> {
        self.stats
            .entry(key)
            .or_insert_with(|| ServerStats::new(latency_prior_ms));
        (latency_prior_ms == 0.0).then_some(SelectorLint::ZeroLatencyPrior)
    }

    fn entry(&mut self, key: &K) -> &mut ServerStats {
        let prior = self.params.latency_prior_ms;
        self.stats
            .entry(key.clone())
            .or_insert_with(|| ServerStats::new(prior))
    }

    pub fn on_dispatch(&mut self, key: &K) {
        let alpha = self.params.alpha;
        self.entry(key).on_dispatch(alpha);
    }

    pub fn on_response(&mut self, key: &K, latency_ms: f64) -> Option<SelectorLint> {
        let alpha = self.params.alpha;
        if self.entry(key).on_response(latency_ms, alpha) {
            None
        } else {
            self.unmatched_responses += 1;
            Some(SelectorLint::UnmatchedResponse)
        }
    }

    /// A failed or cancelled request: frees the in-flight slot but carries
    /// no latency observation.
    pub fn on_failure(&mut self, key: &K) {
        let st = self.entry(key);
        st.inflight = st.inflight.saturating_sub(1);
    }

    /// Score of `key`; unregistered servers score as freshly registered ones.
    pub fn score(&self, key: &K, scorer: Scorer) -> f64 {
        self.stats
            .get(key)
            .copied()
            .unwrap_or_else(|| ServerStats::new(self.params.latency_prior_ms))
            .score(scorer, self.params.exponent)
    }

    /// Picks one server of `mss` among those for which `eligible` holds.
    /// `group` keys the round-robin cursor, normally the MSS index.
    /// Softmax mode always consumes exactly one draw from `rng`.
    pub fn select(
        &mut self,
        group: usize,
        mss: &[K],
        eligible: impl Fn(&K) -> bool,
        policy: &SelectionPolicy,
        rng: &mut impl RngCore,
    ) -> Result<Choice, SelectorError> {
        let n = mss.len();
        if policy.scorer == Scorer::RoundRobin {
            let cursor = self.rr_cursor.entry(group).or_insert(0);
            for step in 0..n {
                let i = (*cursor + step) % n;
                if eligible(&mss[i]) {
                    *cursor = (i + 1) % n;
                    return Ok(Choice {
                        index: i,
                        evaluated: step + 1,
                    });
                }
            }
            return Err(SelectorError::NoEligibleServer);
        }

        let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(n);
        for (i, k) in mss.iter().enumerate() {
            if eligible(k) {
                candidates.push((i, self.score(k, policy.scorer)));
            }
        }
        if candidates.is_empty() {
            return Err(SelectorError::NoEligibleServer);
        }
        let evaluated = candidates.len();
        let index = match policy.mode {
            Mode::Argmin => {
                let mut best = candidates[0];
                for &c in &candidates[1..] {
                    if c.1 < best.1 {
                        best = c;
                    }
                }
                best.0
            }
            Mode::Softmax => {
                let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
                let probs = softmax_probabilities(&scores, policy.tau_rule);
                let u = unit_f64(rng);
                let mut acc = 0.0;
                let mut pick = candidates[candidates.len() - 1].0;
                for (c, p) in candidates.iter().zip(&probs) {
                    acc += p;
                    if u < acc {
                        pick = c.0;
                        break;
                    }
                }
                pick
            }
        };
        Ok(Choice { index, evaluated })
    }
}
