//! SIMILAR, GET-NET and MAKE-PARTITION against an abstract feedback oracle.
//!
//! The subroutines are written as resumable state machines ([`NetBuilder`],
//! [`PartitionBuilder`]) so the online engine can feed them one user sample
//! at a time, in whatever order users arrive. The standalone functions
//! [`similar`], [`get_net`] and [`make_partition`] drive the same machines to
//! completion against a [`FeedbackOracle`].

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itemspace::{Feedback, ItemId, ItemMeasure, ItemType, UserId};
use crate::rng::{derive_rng, stream, SimRng};

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("parameter {name} = {value} out of range ({expected})")]
    Parameter {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("oracle query budget exhausted after {partial} completed samples")]
    Budget { partial: u64 },
    #[error("oracle has no more items to supply")]
    SourceExhausted,
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
}

pub type Result<T, E = SimilarityError> = std::result::Result<T, E>;

fn param(name: &'static str, value: f64, expected: &'static str) -> SimilarityError {
    SimilarityError::Parameter { name, value, expected }
}

/// Multipliers on the proof constants, one per formula family.
///
/// Every factor is 1 in the `paper` preset, which reproduces the closed forms
/// exactly. `explore` multiplies the explore probability `ε_τ` (capped at 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleKnobs {
    /// The 630 in `q_{ε,δ}`.
    pub similar: f64,
    /// The `2^{5d+18}` in `ε_N`.
    pub eps_n: f64,
    /// The accuracy constant `C`.
    pub accuracy: f64,
    /// The `2^{max(3.5d,8)}` in `M_τ`.
    pub items: f64,
    /// The `ν/2` in `D_τ`.
    pub duration: f64,
    /// GET-NET's max-size.
    pub net_size: f64,
    /// GET-NET's max-wait.
    pub net_wait: f64,
    /// Explore probability multiplier.
    pub explore: f64,
    /// The cold-start budget `MP(1)`.
    pub mp: f64,
    /// Stop a SIMILAR test once its outcome can no longer change.
    pub early_decision: bool,
}

impl Default for ScaleKnobs {
    fn default() -> Self {
        Self::paper()
    }
}

impl ScaleKnobs {
    pub fn paper() -> Self {
        ScaleKnobs {
            similar: 1.0,
            eps_n: 1.0,
            accuracy: 1.0,
            items: 1.0,
            duration: 1.0,
            net_size: 1.0,
            net_wait: 1.0,
            explore: 1.0,
            mp: 1.0,
            early_decision: false,
        }
    }

    /// Factors that make cold start observable with `N ≈ 1000`, `T ≤ 500`.
    ///
    /// At ν = 0.1 and d ≈ 2.3 the first epoch runs at ε ≈ 0.01 with a few
    /// thousand items and lasts past the horizon; assignment tests draw about
    /// 20 users and the net stops at a few dozen centers.
    pub fn desk() -> Self {
        ScaleKnobs {
            similar: 7.4e-6,
            eps_n: 1e-45,
            accuracy: 592.0,
            items: 4.8e-11,
            duration: 20.0,
            net_size: 1e-5,
            net_wait: 4.3e-7,
            explore: 1.0,
            mp: 1.0,
            early_decision: true,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let factors = [
            ("scale.similar", self.similar),
            ("scale.eps_n", self.eps_n),
            ("scale.accuracy", self.accuracy),
            ("scale.items", self.items),
            ("scale.duration", self.duration),
            ("scale.net_size", self.net_size),
            ("scale.net_wait", self.net_wait),
            ("scale.explore", self.explore),
            ("scale.mp", self.mp),
        ];
        for (name, v) in factors {
            if !(v.is_finite() && v > 0.0) {
                return Err(param(name, v, "positive and finite"));
            }
        }
        Ok(())
    }
}

/// Parameters of the item-item algorithm and its subroutines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub d: f64,
    pub nu: f64,
    pub n_users: usize,
    pub scale: ScaleKnobs,
}

impl TheoryConstants {
    pub fn new(d: f64, nu: f64, n_users: usize, scale: ScaleKnobs) -> Result<Self> {
        if !(d.is_finite() && d >= 0.0) {
            return Err(param("d", d, "d ≥ 0"));
        }
        if !(nu > 0.0 && nu <= 0.5) {
            return Err(param("nu", nu, "0 < ν ≤ 1/2"));
        }
        if n_users == 0 {
            return Err(param("n_users", 0.0, "N ≥ 1"));
        }
        scale.validate()?;
        Ok(TheoryConstants { d, nu, n_users, scale })
    }

    pub fn paper(d: f64, nu: f64, n_users: usize) -> Result<Self> {
        Self::new(d, nu, n_users, ScaleKnobs::paper())
    }

    /// `C = ν/(148·20)`.
    pub fn c(&self) -> f64 {
        self.scale.accuracy * self.nu / (148.0 * 20.0)
    }

    /// `ε_N = (2^{5d+18}/ν · 630(2d+11)(d+2)^4 / N)^{1/(d+5)}`.
    pub fn eps_n(&self) -> f64 {
        let d = self.d;
        let inner = self.scale.eps_n * 2f64.powf(5.0 * d + 18.0) / self.nu
            * 630.0
            * (2.0 * d + 11.0)
            * (d + 2.0).powi(4)
            / self.n_users as f64;
        inner.powf(1.0 / (d + 5.0))
    }

    /// `ε_τ = max(2^{-τ}, ε_N)·C`.
    pub fn eps_tau(&self, tau: u32) -> f64 {
        assert!(tau >= 1, "epochs are numbered from 1");
        (0.5f64).powi(tau as i32).max(self.eps_n()) * self.c()
    }

    /// `2^{max(3.5d,8)}/ν · (3d+1)`, the prefactor of `M_τ`.
    pub fn c_m(&self) -> f64 {
        self.scale.items * 2f64.powf((3.5 * self.d).max(8.0)) / self.nu * (3.0 * self.d + 1.0)
    }

    /// `M_τ = C_M / ε_τ^{d+2} · ln(2/ε_τ)`.
    pub fn m_tau(&self, tau: u32) -> f64 {
        let e = self.eps_tau(tau);
        self.c_m() / e.powf(self.d + 2.0) * (2.0 / e).ln()
    }

    /// `D_τ = ν/2 · M_τ`.
    pub fn d_tau(&self, tau: u32) -> f64 {
        self.scale.duration * self.nu / 2.0 * self.m_tau(tau)
    }

    /// Items drawn by MAKE-PARTITION in epoch τ (`⌈M_τ⌉`, saturating).
    pub fn items_in_epoch(&self, tau: u32) -> u64 {
        ceil_count(self.m_tau(tau))
    }

    /// Recommendations in epoch τ (`⌈D_τ·N⌉`, saturating).
    pub fn epoch_steps(&self, tau: u32) -> u64 {
        ceil_count(self.d_tau(tau) * self.n_users as f64)
    }

    pub fn explore_prob(&self, tau: u32) -> f64 {
        (self.scale.explore * self.eps_tau(tau)).min(1.0)
    }

    /// `q_{ε,δ} = ⌈630 (d+1)/ε · ln(1/δ)⌉`.
    pub fn q(&self, eps: f64, delta: f64) -> Result<u64> {
        q_sample_size_scaled(eps, delta, self.d, self.scale.similar)
    }

    /// GET-NET's `max-size = (4/ε)^d` (real valued; the loop compares `|C| < max-size`).
    /// A scaled value is kept above 1 so a net can hold its first member.
    pub fn max_size(&self, eps: f64) -> f64 {
        (self.scale.net_size * (4.0 / eps).powf(self.d)).max(1.0)
    }

    /// GET-NET's `max-wait = (5/ε)^d · ln(2·max-size/δ)`.
    pub fn max_wait(&self, eps: f64, delta: f64) -> f64 {
        self.scale.net_wait * (5.0 / eps).powf(self.d) * (2.0 * self.max_size(eps) / delta).ln()
    }

    /// GET-NET's `δ' = δ/(4·max-wait·max-size²)`.
    pub fn delta_prime(&self, eps: f64, delta: f64) -> f64 {
        let size = self.max_size(eps);
        // a scaled max-wait below 1 still allows one repeat draw
        delta / (4.0 * self.max_wait(eps, delta).max(1.0) * size * size)
    }

    /// Cold-start explore budget
    /// `MP(1) = (8/ε_1)^{d+1} · 4·630(d+1)^3 · M_1 · ln²(8/ε_1) · ln(M_1)`.
    pub fn mp1(&self) -> f64 {
        let d = self.d;
        let e1 = self.eps_tau(1);
        let m1 = self.m_tau(1);
        let l8 = (8.0 / e1).ln();
        self.scale.mp * (8.0 / e1).powf(d + 1.0) * 4.0 * 630.0 * (d + 1.0).powi(3) * m1 * l8 * l8 * m1.ln()
    }

    /// `T_MP = MP(1)/N`.
    pub fn t_mp(&self) -> f64 {
        self.mp1() / self.n_users as f64
    }

    /// `T_{min,τ} = 12/ε_τ · ln(1/ε_τ)`.
    pub fn t_min_tau(&self, tau: u32) -> f64 {
        let e = self.eps_tau(tau);
        12.0 / e * (1.0 / e).ln()
    }

    /// `T_min = T_MP + T_{min,1}`.
    pub fn t_min(&self) -> f64 {
        self.t_mp() + self.t_min_tau(1)
    }

    /// `g(ν,d) = ν/4 · C_M · (1/C)^{d+2} · (ν/(630(2d+11)(d+2)^4) / 2^{5d+18})^{(d+2)/(d+5)}`.
    pub fn g(&self) -> f64 {
        let d = self.d;
        let inner = self.nu / (630.0 * (2.0 * d + 11.0) * (d + 2.0).powi(4)) / 2f64.powf(5.0 * d + 18.0);
        self.nu / 4.0 * self.c_m() * (1.0 / self.c()).powf(d + 2.0) * inner.powf((d + 2.0) / (d + 5.0))
    }

    /// `T_max = g(ν,d) · N^{(d+2)/(d+5)}`.
    pub fn t_max(&self) -> f64 {
        let d = self.d;
        self.g() * (self.n_users as f64).powf((d + 2.0) / (d + 5.0))
    }

    /// `α(ν,d) = C' · (1/C_M · 1/ln(2/C))^{(d+1)/(d+2)}` with
    /// `C' = C_M/2 · log2(1/(C(d+2)) · 1/ln(2/C) · 1/C_M) · 2^{4(d+1)}`.
    pub fn alpha(&self) -> f64 {
        let d = self.d;
        let c = self.c();
        let cm = self.c_m();
        let l = (2.0 / c).ln();
        let c_prime = cm / 2.0 * (1.0 / (c * (d + 2.0)) / l / cm).log2() * 2f64.powf(4.0 * (d + 1.0));
        c_prime * (1.0 / cm / l).powf((d + 1.0) / (d + 2.0))
    }

    /// `β = T_min + α·(T_max − T_min)^{(d+1)/(d+2)} · log2(T_max − T_min)`.
    pub fn beta(&self) -> f64 {
        let d = self.d;
        let span = self.t_max() - self.t_min();
        self.t_min() + self.alpha() * span.powf((d + 1.0) / (d + 2.0)) * span.log2()
    }
}

/// Converts a real count bound to an integer count, rounding up and saturating.
pub fn ceil_count(x: f64) -> u64 {
    if x.is_nan() {
        return u64::MAX;
    }
    // `as` saturates at the u64 range
    x.ceil().max(0.0) as u64
}

/// `q_{ε,δ} = ⌈630 (d+1)/ε · ln(1/δ)⌉`.
pub fn q_sample_size(eps: f64, delta: f64, d: f64) -> Result<u64> {
    q_sample_size_scaled(eps, delta, d, 1.0)
}

pub fn q_sample_size_scaled(eps: f64, delta: f64, d: f64, scale: f64) -> Result<u64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(param("eps", eps, "0 < ε ≤ 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param("delta", delta, "0 < δ < 1"));
    }
    if !(d.is_finite() && d >= 0.0) {
        return Err(param("d", d, "d ≥ 0"));
    }
    let q = ceil_count(scale * 630.0 * (d + 1.0) / eps * (1.0 / delta).ln());
    Ok(q.max(1))
}

/// Smallest disagreement count `k` with `k/q ≥ 0.9ε`; SIMILAR returns False iff
/// the count reaches it.
pub fn reject_threshold(q: u64, eps: f64) -> u64 {
    let target = 0.9 * eps;
    let qf = q as f64;
    let mut k = (target * qf).ceil().max(0.0) as u64;
    while k > 0 && (k - 1) as f64 / qf >= target {
        k -= 1;
    }
    while (k as f64) / qf < target {
        k += 1;
    }
    k
}

/// Supplies fresh items drawn from μ.
pub trait ItemSource {
    fn draw_item(&mut self) -> Result<ItemId>;
}

/// Query access to the hidden preferences, as used by standalone runs.
pub trait FeedbackOracle: ItemSource {
    fn n_users(&self) -> usize;
    fn sample_user(&mut self) -> Result<UserId>;
    fn query(&mut self, user: UserId, item: ItemId) -> Result<Feedback>;

    /// Disagreement count of `q` uniform user samples, drawn in one shot.
    ///
    /// Oracles that know the true distance may return a Binomial(q, γ) draw,
    /// which has the same law as `q` individual samples. `None` means the
    /// caller must sample users one by one.
    fn batch_disagreements(&mut self, _a: ItemId, _b: ItemId, _q: u64) -> Option<Result<u64>> {
        None
    }
}

/// Identifies one user sample of one SIMILAR call.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ticket {
    pub call: u64,
    pub index: u32,
}

/// A single SIMILAR call in progress.
///
/// Samples are stored in the order they were opened and the outcome is
/// evaluated on the longest completed prefix, so completing samples out of
/// order gives the same decision as completing them in order.
#[derive(Clone, Debug)]
pub struct SimilarTest {
    pub call: u64,
    pub first: ItemId,
    pub second: ItemId,
    pub q: u64,
    pub threshold: u64,
    early: bool,
    results: Vec<Option<bool>>,
    users: Vec<UserId>,
    prefix: usize,
    prefix_disagreements: u64,
    decision: Option<(bool, usize)>,
}

impl SimilarTest {
    pub fn new(call: u64, first: ItemId, second: ItemId, q: u64, eps: f64, early: bool) -> Self {
        SimilarTest {
            call,
            first,
            second,
            q,
            threshold: reject_threshold(q, eps),
            early,
            results: Vec::new(),
            users: Vec::new(),
            prefix: 0,
            prefix_disagreements: 0,
            decision: None,
        }
    }

    /// `Some(similar)` once decided.
    pub fn outcome(&self) -> Option<bool> {
        self.decision.map(|(s, _)| s)
    }

    /// Users of the samples the decision was based on.
    pub fn decisive_users(&self) -> &[UserId] {
        match self.decision {
            Some((_, n)) => &self.users[..n],
            None => &[],
        }
    }

    pub fn opened(&self) -> usize {
        self.results.len()
    }

    pub fn sampled(&self, user: UserId) -> bool {
        self.users.contains(&user)
    }

    pub fn can_open(&self) -> bool {
        self.decision.is_none() && (self.results.len() as u64) < self.q
    }

    pub fn open(&mut self, user: UserId) -> Option<Ticket> {
        if !self.can_open() {
            return None;
        }
        let index = self.results.len() as u32;
        self.results.push(None);
        self.users.push(user);
        Some(Ticket { call: self.call, index })
    }

    pub fn complete(&mut self, ticket: Ticket, disagree: bool) {
        if ticket.call != self.call || self.decision.is_some() {
            return;
        }
        let slot = match self.results.get_mut(ticket.index as usize) {
            Some(slot) if slot.is_none() => slot,
            _ => return,
        };
        *slot = Some(disagree);
        while self.decision.is_none() {
            let Some(Some(x)) = self.results.get(self.prefix).copied() else {
                break;
            };
            self.prefix += 1;
            self.prefix_disagreements += x as u64;
            self.decide();
        }
    }

    fn decide(&mut self) {
        let n = self.prefix;
        if self.prefix_disagreements >= self.threshold {
            if self.early || n as u64 == self.q {
                self.decision = Some((false, n));
            }
        } else if n as u64 == self.q
            || (self.early && self.prefix_disagreements + (self.q - n as u64) < self.threshold)
        {
            self.decision = Some((true, n));
        }
    }

    /// Decides from a disagreement count over all `q` samples at once.
    pub fn resolve(&mut self, disagreements: u64) {
        if self.decision.is_none() {
            self.decision = Some((disagreements < self.threshold, 0));
        }
    }
}

/// What a resumable subroutine needs next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    /// A SIMILAR call between the two items is in progress.
    Test { first: ItemId, second: ItemId, q: u64 },
    Finished,
}

/// What the engine should do for an arriving user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Demand {
    /// Rate both items for this sample.
    Sample { ticket: Ticket, first: ItemId, second: ItemId },
    /// A SIMILAR call is waiting on samples already handed out.
    Waiting,
    Finished,
}

/// Common driver interface of [`NetBuilder`] and [`PartitionBuilder`].
pub trait Resumable {
    /// Runs all bookkeeping that needs no feedback and reports the next need.
    fn advance(&mut self, source: &mut dyn ItemSource) -> Result<Stage>;
    /// Opens a sample for `user` of the test `advance` last reported.
    fn open(&mut self, user: UserId) -> Option<Ticket>;
    /// Opens a sample for `user` of any test taking samples, preferring one
    /// where `known` says the user has rated one of its items already.
    fn open_for(&mut self, user: UserId, known: &dyn Fn(ItemId) -> bool) -> Option<(Ticket, ItemId, ItemId)>;
    /// Records the user's two answers; stale tickets are ignored.
    fn complete(&mut self, ticket: Ticket, first: Feedback, second: Feedback);
    /// Resolves the current test from a batch disagreement count.
    fn resolve(&mut self, disagreements: u64);

    fn demand(&mut self, user: UserId, source: &mut dyn ItemSource) -> Result<Demand> {
        match self.advance(source)? {
            Stage::Finished => Ok(Demand::Finished),
            Stage::Test { first, second, .. } => Ok(match self.open(user) {
                Some(ticket) => Demand::Sample { ticket, first, second },
                None => Demand::Waiting,
            }),
        }
    }
}

/// Why GET-NET stopped.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetStop {
    MaxWait,
    MaxSize,
}

/// Output of GET-NET.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub members: Vec<ItemId>,
    pub eps: f64,
    pub delta: f64,
    pub max_size: f64,
    pub max_wait: f64,
    pub draws: u64,
    pub stop: NetStop,
}

/// One item tested against a list of reference items.
#[derive(Clone, Debug)]
struct Job {
    item: ItemId,
    tests: Vec<SimilarTest>,
    /// A test came back similar and the remaining ones are moot.
    hit: bool,
}

/// Ordered SIMILAR calls of which at most `window` take samples at once.
///
/// Calls are created, numbered and finalized in the order a sequential run
/// makes them, so a window of 1 is the sequential execution.
#[derive(Clone, Debug)]
struct Pipeline {
    jobs: VecDeque<Job>,
    window: usize,
    q: u64,
    eps: f64,
    early: bool,
    /// Net candidates stop at their first similar member.
    stop_on_hit: bool,
    /// Test order is `(item, reference)` rather than `(reference, item)`.
    item_first: bool,
    next_call: u64,
    focus: Option<u64>,
}

impl Pipeline {
    fn new(window: usize, q: u64, eps: f64, early: bool, stop_on_hit: bool, item_first: bool, next_call: u64) -> Self {
        Pipeline {
            jobs: VecDeque::new(),
            window: window.max(1),
            q,
            eps,
            early,
            stop_on_hit,
            item_first,
            next_call,
            focus: None,
        }
    }

    fn make_test(&mut self, item: ItemId, reference: ItemId) -> SimilarTest {
        let call = self.next_call;
        self.next_call += 1;
        let (a, b) = if self.item_first { (item, reference) } else { (reference, item) };
        SimilarTest::new(call, a, b, self.q, self.eps, self.early)
    }

    fn push(&mut self, item: ItemId, refs: &[ItemId]) {
        let tests = refs.iter().map(|&r| self.make_test(item, r)).collect();
        self.jobs.push_back(Job { item, tests, hit: false });
    }

    /// Adds a reference to every job still in flight.
    fn add_ref(&mut self, reference: ItemId) {
        for k in 0..self.jobs.len() {
            if self.jobs[k].hit {
                continue;
            }
            let item = self.jobs[k].item;
            let test = self.make_test(item, reference);
            self.jobs[k].tests.push(test);
        }
    }

    fn live(job: &Job, stop_on_hit: bool) -> impl Iterator<Item = (usize, &SimilarTest)> {
        let skip = stop_on_hit && job.hit;
        job.tests
            .iter()
            .enumerate()
            .filter(move |(_, t)| !skip && t.outcome().is_none())
    }

    fn undecided(&self) -> usize {
        self.jobs.iter().map(|j| Self::live(j, self.stop_on_hit).count()).sum()
    }

    /// Positions of the first `window` undecided tests.
    fn eligible(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, job) in self.jobs.iter().enumerate() {
            for (t, _) in Self::live(job, self.stop_on_hit) {
                if out.len() == self.window {
                    return out;
                }
                out.push((k, t));
            }
        }
        out
    }

    fn front_ready(&self) -> bool {
        self.jobs
            .front()
            .is_some_and(|j| Self::live(j, self.stop_on_hit).next().is_none())
    }

    fn stage(&mut self) -> Option<Stage> {
        let eligible = self.eligible();
        let &(k, t) = eligible
            .iter()
            .find(|&&(k, t)| self.jobs[k].tests[t].can_open())
            .or(eligible.first())?;
        let test = &self.jobs[k].tests[t];
        self.focus = Some(test.call);
        Some(Stage::Test {
            first: test.first,
            second: test.second,
            q: test.q,
        })
    }

    fn find(&mut self, call: u64) -> Option<(usize, usize)> {
        self.jobs
            .iter()
            .enumerate()
            .find_map(|(k, j)| j.tests.iter().position(|t| t.call == call).map(|t| (k, t)))
    }

    fn note(&mut self, k: usize, t: usize) {
        if self.jobs[k].tests[t].outcome() == Some(true) {
            self.jobs[k].hit = true;
        }
    }

    fn open(&mut self, user: UserId) -> Option<Ticket> {
        let (k, t) = self.find(self.focus?)?;
        self.jobs[k].tests[t].open(user)
    }

    fn open_for(&mut self, user: UserId, known: &dyn Fn(ItemId) -> bool) -> Option<(Ticket, ItemId, ItemId)> {
        let eligible = self.eligible();
        let mut fallback = None;
        let mut preferred = None;
        for &(k, t) in &eligible {
            let test = &self.jobs[k].tests[t];
            if !test.can_open() {
                continue;
            }
            fallback.get_or_insert((k, t));
            if !test.sampled(user) && (known(test.first) || known(test.second)) {
                preferred = Some((k, t));
                break;
            }
        }
        let (k, t) = preferred.or(fallback)?;
        let test = &mut self.jobs[k].tests[t];
        let ticket = test.open(user)?;
        Some((ticket, test.first, test.second))
    }

    fn complete(&mut self, ticket: Ticket, disagree: bool) {
        if let Some((k, t)) = self.find(ticket.call) {
            self.jobs[k].tests[t].complete(ticket, disagree);
            self.note(k, t);
        }
    }

    fn resolve(&mut self, disagreements: u64) {
        let Some(call) = self.focus else { return };
        if let Some((k, t)) = self.find(call) {
            self.jobs[k].tests[t].resolve(disagreements);
            self.note(k, t);
        }
    }
}

/// Resumable GET-NET(ε, δ).
#[derive(Clone, Debug)]
pub struct NetBuilder {
    eps: f64,
    delta: f64,
    max_size: f64,
    max_wait: f64,
    q: u64,
    members: Vec<ItemId>,
    count: u64,
    pipe: Pipeline,
    drawn: Vec<ItemId>,
    sample_users: Vec<UserId>,
    tests_run: u64,
    result: Option<Net>,
}

impl NetBuilder {
    pub fn new(eps: f64, delta: f64, consts: &TheoryConstants) -> Result<Self> {
        Self::with_call_base(eps, delta, consts, 0)
    }

    fn with_call_base(eps: f64, delta: f64, consts: &TheoryConstants, call_base: u64) -> Result<Self> {
        let max_size = consts.max_size(eps);
        let max_wait = consts.max_wait(eps, delta);
        let q = consts.q(eps, consts.delta_prime(eps, delta))?;
        Ok(NetBuilder {
            eps,
            delta,
            max_size,
            max_wait,
            q,
            members: Vec::new(),
            count: 0,
            pipe: Pipeline::new(1, q, eps, consts.scale.early_decision, true, true, call_base),
            drawn: Vec::new(),
            sample_users: Vec::new(),
            tests_run: 0,
            result: None,
        })
    }

    /// Lets up to `window` SIMILAR calls take samples at the same time.
    /// Later candidates are tested speculatively and finalized in draw order.
    pub fn with_concurrency(mut self, window: usize) -> Self {
        self.pipe.window = window.max(1);
        self
    }

    pub fn q(&self) -> u64 {
        self.q
    }

    pub fn members(&self) -> &[ItemId] {
        &self.members
    }

    pub fn drawn(&self) -> &[ItemId] {
        &self.drawn
    }

    pub fn sample_users(&self) -> &[UserId] {
        &self.sample_users
    }

    pub fn tests_run(&self) -> u64 {
        self.tests_run
    }

    pub fn result(&self) -> Option<&Net> {
        self.result.as_ref()
    }

    fn next_call(&self) -> u64 {
        self.pipe.next_call
    }

    fn keep_drawing(&self) -> bool {
        (self.count as f64) <= self.max_wait && (self.members.len() as f64) < self.max_size
    }

    fn finish(&mut self) {
        let size_ok = (self.members.len() as f64) < self.max_size;
        self.pipe.jobs.clear();
        self.result = Some(Net {
            members: self.members.clone(),
            eps: self.eps,
            delta: self.delta,
            max_size: self.max_size,
            max_wait: self.max_wait,
            draws: self.drawn.len() as u64,
            stop: if size_ok { NetStop::MaxWait } else { NetStop::MaxSize },
        });
    }
}

fn record(job: &Job, tests_run: &mut u64, users: &mut Vec<UserId>) {
    for t in job.tests.iter().filter(|t| t.outcome().is_some()) {
        *tests_run += 1;
        users.extend_from_slice(t.decisive_users());
    }
}

impl Resumable for NetBuilder {
    fn advance(&mut self, source: &mut dyn ItemSource) -> Result<Stage> {
        loop {
            if self.result.is_some() {
                return Ok(Stage::Finished);
            }
            if !self.pipe.jobs.is_empty() && self.pipe.front_ready() {
                let job = self.pipe.jobs.pop_front().expect("front");
                record(&job, &mut self.tests_run, &mut self.sample_users);
                if job.hit {
                    self.count += 1;
                } else {
                    // dissimilar to every member, including the empty net
                    self.members.push(job.item);
                    self.count = 0;
                    self.pipe.add_ref(job.item);
                }
                if !self.keep_drawing() {
                    self.finish();
                }
                continue;
            }
            if self.pipe.jobs.is_empty() && !self.keep_drawing() {
                self.finish();
                continue;
            }
            if self.pipe.undecided() < self.pipe.window {
                let item = source.draw_item()?;
                self.drawn.push(item);
                let members = self.members.clone();
                self.pipe.push(item, &members);
                continue;
            }
            return Ok(self.pipe.stage().expect("undecided tests remain"));
        }
    }

    fn open(&mut self, user: UserId) -> Option<Ticket> {
        self.pipe.open(user)
    }

    fn open_for(&mut self, user: UserId, known: &dyn Fn(ItemId) -> bool) -> Option<(Ticket, ItemId, ItemId)> {
        self.pipe.open_for(user, known)
    }

    fn complete(&mut self, ticket: Ticket, first: Feedback, second: Feedback) {
        self.pipe.complete(ticket, first != second);
    }

    fn resolve(&mut self, disagreements: u64) {
        self.pipe.resolve(disagreements);
    }
}

/// Parameters a partition was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub m: u64,
    pub eps: f64,
    pub delta: f64,
}

/// Output of MAKE-PARTITION: disjoint blocks of similar items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub blocks: Vec<Vec<ItemId>>,
    pub eps: f64,
    pub params: PartitionParams,
    pub net: Vec<ItemId>,
    pub assigned: u64,
    pub discarded: u64,
}

impl Partition {
    pub fn empty(eps: f64, delta: f64) -> Self {
        Partition {
            blocks: Vec::new(),
            eps,
            params: PartitionParams { m: 0, eps, delta },
            net: Vec::new(),
            assigned: 0,
            discarded: 0,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_items(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Upper size bound after splitting, `⌊1/ε⌋`.
    pub fn max_block_size(&self) -> usize {
        block_cap(self.eps)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Largest block size allowed after splitting, `⌊1/ε⌋`.
pub fn block_cap(eps: f64) -> usize {
    ((1.0 / eps + 1e-9).floor() as usize).max(1)
}

/// Splits a block larger than `1/ε` into `⌈|P|/⌊1/ε⌋⌉` contiguous chunks whose
/// sizes differ by at most one. Smaller blocks are returned unchanged.
///
/// This is the fewest chunks that respect the upper bound, so the smallest
/// chunk is as large as it can be; it reaches `1/(2ε)` whenever any chunking can.
pub fn split_block(block: Vec<ItemId>, eps: f64) -> Vec<Vec<ItemId>> {
    let n = block.len();
    let cap = block_cap(eps);
    if n <= cap {
        return vec![block];
    }
    let chunks = n.div_ceil(cap);
    let base = n / chunks;
    let extra = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut it = block.into_iter();
    for c in 0..chunks {
        let len = base + usize::from(c < extra);
        out.push(it.by_ref().take(len).collect());
    }
    out
}

#[derive(Clone, Debug)]
enum PartitionStage {
    Net,
    Assign,
    Done,
}

/// Resumable MAKE-PARTITION(M, ε, δ).
#[derive(Clone, Debug)]
pub struct PartitionBuilder {
    m: u64,
    eps: f64,
    delta: f64,
    consts: TheoryConstants,
    stage: PartitionStage,
    net: NetBuilder,
    window: usize,
    centers: Vec<ItemId>,
    q_assign: u64,
    blocks: Vec<Vec<ItemId>>,
    drawn_count: u64,
    pipe: Pipeline,
    drawn: Vec<ItemId>,
    sample_users: Vec<UserId>,
    tests_run: u64,
    assigned: u64,
    discarded: u64,
    rng: SimRng,
    result: Option<Partition>,
}

impl PartitionBuilder {
    /// `seed` drives the uniform choice among similar net members.
    pub fn new(m: u64, eps: f64, delta: f64, consts: &TheoryConstants, seed: u64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(param("eps", eps, "0 < ε ≤ 1"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(param("delta", delta, "0 < δ < 1"));
        }
        let net = NetBuilder::new(eps / 2.0, delta / 2.0, consts)?;
        let mut builder = PartitionBuilder {
            m,
            eps,
            delta,
            consts: consts.clone(),
            stage: PartitionStage::Net,
            net,
            window: 1,
            centers: Vec::new(),
            q_assign: 0,
            blocks: Vec::new(),
            drawn_count: 0,
            pipe: Pipeline::new(1, 0, 0.6 * eps, false, false, false, 0),
            drawn: Vec::new(),
            sample_users: Vec::new(),
            tests_run: 0,
            assigned: 0,
            discarded: 0,
            rng: derive_rng(seed, stream::EXPLORE),
            result: None,
        };
        if m == 0 {
            builder.result = Some(Partition {
                params: PartitionParams { m: 0, eps, delta },
                ..Partition::empty(eps, delta)
            });
            builder.stage = PartitionStage::Done;
        }
        Ok(builder)
    }

    /// Lets up to `window` SIMILAR calls take samples at the same time, in
    /// both the net and the assignment stage. Results are still finalized in
    /// the sequential order; 1 (the default) is the sequential execution.
    pub fn with_concurrency(mut self, window: usize) -> Self {
        self.window = window.max(1);
        self.net = self.net.with_concurrency(self.window);
        self
    }

    pub fn is_finished(&self) -> bool {
        self.result.is_some()
    }

    pub fn result(&self) -> Option<&Partition> {
        self.result.as_ref()
    }

    pub fn into_result(self) -> Option<Partition> {
        self.result
    }

    /// Items drawn from μ so far, net candidates first.
    pub fn drawn(&self) -> Vec<ItemId> {
        let mut all = self.net.drawn().to_vec();
        all.extend_from_slice(&self.drawn);
        all
    }

    /// Users of every decisive sample. With a window of 1 this is the order
    /// a sequential run draws them in.
    pub fn sample_users(&self) -> Vec<UserId> {
        let mut all = self.net.sample_users().to_vec();
        all.extend_from_slice(&self.sample_users);
        all
    }

    pub fn tests_run(&self) -> u64 {
        self.net.tests_run() + self.tests_run
    }

    pub fn params(&self) -> PartitionParams {
        PartitionParams {
            m: self.m,
            eps: self.eps,
            delta: self.delta,
        }
    }

    fn finish(&mut self) {
        let blocks = std::mem::take(&mut self.blocks)
            .into_iter()
            .filter(|b| !b.is_empty())
            .flat_map(|b| split_block(b, self.eps))
            .collect();
        self.result = Some(Partition {
            blocks,
            eps: self.eps,
            params: self.params(),
            net: self.centers.clone(),
            assigned: self.assigned,
            discarded: self.discarded,
        });
        self.stage = PartitionStage::Done;
    }
}

impl Resumable for PartitionBuilder {
    fn advance(&mut self, source: &mut dyn ItemSource) -> Result<Stage> {
        loop {
            match self.stage {
                PartitionStage::Done => return Ok(Stage::Finished),
                PartitionStage::Net => match self.net.advance(source)? {
                    Stage::Finished => {
                        self.centers = self.net.members().to_vec();
                        self.blocks = vec![Vec::new(); self.centers.len()];
                        let k = self.centers.len().max(1) as f64;
                        let delta_assign = self.delta / (4.0 * self.m as f64 * k);
                        self.q_assign = self.consts.q(0.6 * self.eps, delta_assign)?;
                        self.pipe = Pipeline::new(
                            self.window,
                            self.q_assign,
                            0.6 * self.eps,
                            self.consts.scale.early_decision,
                            false,
                            false,
                            self.net.next_call(),
                        );
                        self.stage = PartitionStage::Assign;
                    }
                    test => return Ok(test),
                },
                PartitionStage::Assign => {
                    if self.pipe.front_ready() {
                        let job = self.pipe.jobs.pop_front().expect("front");
                        record(&job, &mut self.tests_run, &mut self.sample_users);
                        let similar_to: Vec<usize> = job
                            .tests
                            .iter()
                            .enumerate()
                            .filter(|(_, t)| t.outcome() == Some(true))
                            .map(|(c, _)| c)
                            .collect();
                        if similar_to.is_empty() {
                            self.discarded += 1;
                        } else {
                            let pick = similar_to[self.rng.gen_range(0..similar_to.len())];
                            self.blocks[pick].push(job.item);
                            self.assigned += 1;
                        }
                        continue;
                    }
                    if self.drawn_count < self.m && self.pipe.undecided() < self.pipe.window {
                        let item = source.draw_item()?;
                        self.drawn.push(item);
                        self.drawn_count += 1;
                        let centers = self.centers.clone();
                        self.pipe.push(item, &centers);
                        continue;
                    }
                    if self.pipe.jobs.is_empty() {
                        self.finish();
                        continue;
                    }
                    return Ok(self.pipe.stage().expect("undecided tests remain"));
                }
            }
        }
    }

    fn open(&mut self, user: UserId) -> Option<Ticket> {
        match self.stage {
            PartitionStage::Net => self.net.open(user),
            PartitionStage::Assign => self.pipe.open(user),
            PartitionStage::Done => None,
        }
    }

    fn open_for(&mut self, user: UserId, known: &dyn Fn(ItemId) -> bool) -> Option<(Ticket, ItemId, ItemId)> {
        match self.stage {
            PartitionStage::Net => self.net.open_for(user, known),
            PartitionStage::Assign => self.pipe.open_for(user, known),
            PartitionStage::Done => None,
        }
    }

    fn complete(&mut self, ticket: Ticket, first: Feedback, second: Feedback) {
        match self.stage {
            PartitionStage::Net => self.net.complete(ticket, first, second),
            PartitionStage::Assign => self.pipe.complete(ticket, first != second),
            PartitionStage::Done => {}
        }
    }

    fn resolve(&mut self, disagreements: u64) {
        match self.stage {
            PartitionStage::Net => self.net.resolve(disagreements),
            PartitionStage::Assign => self.pipe.resolve(disagreements),
            PartitionStage::Done => {}
        }
    }
}

/// Where a [`SimOracle`] gets its items.
#[derive(Clone, Debug)]
pub enum ItemFeed {
    Measure(ItemMeasure),
    /// Replays a fixed sequence of types; errors when it runs out.
    Scripted(Vec<Arc<ItemType>>),
}

/// Where a [`SimOracle`] gets its sample users.
#[derive(Clone, Debug)]
pub enum UserFeed {
    Uniform,
    Scripted(Vec<UserId>),
}

/// Standalone oracle over a hidden preference matrix grown on demand.
#[derive(Clone, Debug)]
pub struct SimOracle {
    n_users: usize,
    items: Vec<Arc<ItemType>>,
    feed: ItemFeed,
    feed_pos: usize,
    users: UserFeed,
    user_pos: usize,
    item_rng: SimRng,
    user_rng: SimRng,
    queries: u64,
    budget: Option<u64>,
    batch: bool,
}

impl SimOracle {
    pub fn new(measure: ItemMeasure, seed: u64) -> Self {
        SimOracle {
            n_users: measure.n_users(),
            items: Vec::new(),
            feed: ItemFeed::Measure(measure),
            feed_pos: 0,
            users: UserFeed::Uniform,
            user_pos: 0,
            item_rng: derive_rng(seed, stream::ITEMS),
            user_rng: derive_rng(seed, stream::ARRIVALS),
            queries: 0,
            budget: None,
            batch: false,
        }
    }

    pub fn scripted(n_users: usize, items: Vec<Arc<ItemType>>, users: Vec<UserId>) -> Self {
        SimOracle {
            n_users,
            items: Vec::new(),
            feed: ItemFeed::Scripted(items),
            feed_pos: 0,
            users: UserFeed::Scripted(users),
            user_pos: 0,
            item_rng: derive_rng(0, stream::ITEMS),
            user_rng: derive_rng(0, stream::ARRIVALS),
            queries: 0,
            budget: None,
            batch: false,
        }
    }

    /// Caps the number of `query` calls.
    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    /// Answers whole SIMILAR calls with a Binomial(q, γ) draw.
    pub fn with_batch_sampling(mut self, on: bool) -> Self {
        self.batch = on;
        self
    }

    /// Plants an item of the given type and returns its handle.
    pub fn insert(&mut self, ty: ItemType) -> ItemId {
        assert_eq!(ty.n_users(), self.n_users, "planted type has the wrong length");
        self.items.push(Arc::new(ty));
        ItemId(self.items.len() as u32 - 1)
    }

    pub fn item_type(&self, id: ItemId) -> Option<&Arc<ItemType>> {
        self.items.get(id.index())
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

impl ItemSource for SimOracle {
    fn draw_item(&mut self) -> Result<ItemId> {
        let ty = match &self.feed {
            ItemFeed::Measure(m) => m.sample_item(&mut self.item_rng),
            ItemFeed::Scripted(seq) => {
                let ty = seq.get(self.feed_pos).cloned().ok_or(SimilarityError::SourceExhausted)?;
                self.feed_pos += 1;
                ty
            }
        };
        self.items.push(ty);
        Ok(ItemId(self.items.len() as u32 - 1))
    }
}

impl FeedbackOracle for SimOracle {
    fn n_users(&self) -> usize {
        self.n_users
    }

    fn sample_user(&mut self) -> Result<UserId> {
        match &self.users {
            UserFeed::Uniform => Ok(self.user_rng.gen_range(0..self.n_users as u32)),
            UserFeed::Scripted(seq) => {
                let u = *seq.get(self.user_pos).ok_or(SimilarityError::SourceExhausted)?;
                self.user_pos += 1;
                Ok(u)
            }
        }
    }

    fn query(&mut self, user: UserId, item: ItemId) -> Result<Feedback> {
        if let Some(budget) = self.budget {
            if self.queries >= budget {
                return Err(SimilarityError::Budget { partial: self.queries / 2 });
            }
        }
        let ty = self.items.get(item.index()).ok_or(SimilarityError::UnknownItem(item))?;
        self.queries += 1;
        Ok(ty.pref(user as usize))
    }

    fn batch_disagreements(&mut self, a: ItemId, b: ItemId, q: u64) -> Option<Result<u64>> {
        if !self.batch {
            return None;
        }
        let (Some(x), Some(y)) = (self.items.get(a.index()), self.items.get(b.index())) else {
            return Some(Err(SimilarityError::UnknownItem(a)));
        };
        let gamma = x.disagreements(y).expect("types share a dimension") as f64 / self.n_users as f64;
        let dist = Binomial::new(q, gamma).expect("γ is a probability");
        Some(Ok(dist.sample(&mut self.user_rng)))
    }
}

/// Drives a resumable subroutine to completion against an oracle.
pub fn run_to_completion<D: Resumable + ?Sized>(driver: &mut D, oracle: &mut dyn FeedbackOracle) -> Result<()> {
    let mut completed = 0u64;
    loop {
        match driver.advance(oracle)? {
            Stage::Finished => return Ok(()),
            Stage::Test { first, second, q } => {
                if let Some(count) = oracle.batch_disagreements(first, second, q) {
                    driver.resolve(count?);
                    continue;
                }
                let user = oracle.sample_user()?;
                let ticket = driver.open(user).expect("an undecided test accepts samples");
                let fa = oracle.query(user, first).map_err(|e| with_partial(e, completed))?;
                let fb = oracle.query(user, second).map_err(|e| with_partial(e, completed))?;
                driver.complete(ticket, fa, fb);
                completed += 1;
            }
        }
    }
}

fn with_partial(err: SimilarityError, completed: u64) -> SimilarityError {
    match err {
        SimilarityError::Budget { .. } => SimilarityError::Budget { partial: completed },
        other => other,
    }
}

/// SIMILAR(i, j, ε, δ): false iff at least a 0.9ε fraction of `q_{ε,δ}`
/// uniformly sampled users disagree on the two items.
pub fn similar(
    i: ItemId,
    j: ItemId,
    eps: f64,
    delta: f64,
    consts: &TheoryConstants,
    oracle: &mut dyn FeedbackOracle,
) -> Result<bool> {
    let q = consts.q(eps, delta)?;
    let mut test = SimilarTest::new(0, i, j, q, eps, consts.scale.early_decision);
    if let Some(count) = oracle.batch_disagreements(i, j, q) {
        test.resolve(count?);
    }
    let mut completed = 0;
    while test.outcome().is_none() {
        let user = oracle.sample_user()?;
        let ticket = test.open(user).expect("undecided");
        let fa = oracle.query(user, i).map_err(|e| with_partial(e, completed))?;
        let fb = oracle.query(user, j).map_err(|e| with_partial(e, completed))?;
        test.complete(ticket, fa != fb);
        completed += 1;
    }
    Ok(test.outcome().unwrap())
}

/// GET-NET(ε, δ) run standalone.
pub fn get_net(eps: f64, delta: f64, consts: &TheoryConstants, oracle: &mut dyn FeedbackOracle) -> Result<Net> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(param("eps", eps, "0 < ε ≤ 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param("delta", delta, "0 < δ < 1"));
    }
    let mut builder = NetBuilder::new(eps, delta, consts)?;
    run_to_completion(&mut builder, oracle)?;
    Ok(builder.result.expect("finished"))
}

/// MAKE-PARTITION(M, ε, δ) run standalone.
pub fn make_partition(
    m: u64,
    eps: f64,
    delta: f64,
    consts: &TheoryConstants,
    oracle: &mut dyn FeedbackOracle,
    seed: u64,
) -> Result<Partition> {
    let mut builder = PartitionBuilder::new(m, eps, delta, consts, seed)?;
    run_to_completion(&mut builder, oracle)?;
    Ok(builder.into_result().expect("finished"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itemspace::FiniteMixture;

    fn consts(d: f64) -> TheoryConstants {
        TheoryConstants::paper(d, 0.1, 100).unwrap()
    }

    fn single_type_oracle(n: usize, seed: u64) -> SimOracle {
        let ty = ItemType::from_likes(n, 0..n / 5);
        let m = ItemMeasure::FiniteMixture(FiniteMixture::new(n, vec![ty], vec![1.0]).unwrap());
        SimOracle::new(m, seed)
    }

    #[test]
    fn q_examples() {
        assert_eq!(q_sample_size(0.1, 0.5, 0.0).unwrap(), (6300.0 * 2f64.ln()).ceil() as u64);
        assert_eq!(q_sample_size(0.1, 0.5, 0.0).unwrap(), 4367);
        assert_eq!(q_sample_size(1.0, (-1f64).exp(), 0.0).unwrap(), 630);
        assert!(q_sample_size(0.1, 1.0, 0.0).is_err());
        assert!(q_sample_size(0.0, 0.5, 0.0).is_err());
        assert!(q_sample_size(1.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn threshold_matches_float_rule() {
        for q in [1u64, 7, 100, 630, 4367, 14507] {
            for eps in [0.01, 0.1, 0.2, 0.6 * 0.2, 1.0] {
                let k = reject_threshold(q, eps);
                assert!(k as f64 / q as f64 >= 0.9 * eps);
                assert!(k == 0 || ((k - 1) as f64 / q as f64) < 0.9 * eps);
            }
        }
    }

    #[test]
    fn c_example() {
        let c = consts(1.0).c();
        assert_eq!(c, 0.1 / 2960.0);
        assert!((c - 3.3784e-5).abs() < 1e-9);
    }

    #[test]
    fn schedule_plateau_and_ratio() {
        let k = TheoryConstants::paper(1.0, 0.1, 1000).unwrap();
        // ε_N > 1/2 at this N, so every epoch already sits on the plateau
        assert!(k.eps_n() > 0.5);
        assert_eq!(k.eps_tau(1).to_bits(), k.eps_tau(9).to_bits());
        for tau in 1..10 {
            assert!((k.d_tau(tau) / k.m_tau(tau) - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn similar_identical_and_antipodal() {
        let mut o = single_type_oracle(50, 1);
        let x = ItemType::from_likes(50, 0..10);
        let y = ItemType::from_fn(50, |u| !x.likes(u));
        let a = o.insert(x.clone());
        let b = o.insert(x);
        let c = o.insert(y);
        let k = consts(1.0);
        assert!(similar(a, b, 0.3, 0.2, &k, &mut o).unwrap());
        assert!(!similar(a, c, 1.0, 0.2, &k, &mut o).unwrap());
    }

    #[test]
    fn early_decision_agrees_with_full_run() {
        let n = 40;
        let x = ItemType::from_likes(n, 0..8);
        let y = ItemType::from_likes(n, 2..10);
        for seed in 0..20 {
            let mut outcomes = Vec::new();
            for early in [false, true] {
                let mut k = TheoryConstants::paper(0.0, 0.1, n).unwrap();
                k.scale.similar = 0.02;
                k.scale.early_decision = early;
                let mut o = single_type_oracle(n, seed);
                let a = o.insert(x.clone());
                let b = o.insert(y.clone());
                outcomes.push((similar(a, b, 0.12, 0.1, &k, &mut o).unwrap(), o.queries()));
            }
            assert_eq!(outcomes[0].0, outcomes[1].0);
            assert!(outcomes[1].1 <= outcomes[0].1);
        }
    }

    #[test]
    fn budget_error_carries_partial_count() {
        let mut o = single_type_oracle(10, 0).with_budget(20);
        let a = o.insert(ItemType::from_likes(10, [0]));
        let b = o.insert(ItemType::from_likes(10, [1]));
        match similar(a, b, 0.5, 0.5, &consts(0.0), &mut o) {
            Err(SimilarityError::Budget { partial }) => assert_eq!(partial, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_order_completion_matches_in_order() {
        let mut a = SimilarTest::new(1, ItemId(0), ItemId(1), 10, 0.5, false);
        let mut b = a.clone();
        let pattern = [true, false, false, true, false, true, false, false, false, true];
        let ta: Vec<_> = (0..10).map(|u| a.open(u).unwrap()).collect();
        let tb: Vec<_> = (0..10).map(|u| b.open(u).unwrap()).collect();
        for (t, &x) in ta.iter().zip(&pattern) {
            a.complete(*t, x);
        }
        for (t, &x) in tb.iter().zip(&pattern).rev() {
            b.complete(*t, x);
        }
        assert_eq!(a.outcome(), b.outcome());
        // stale and foreign tickets are ignored
        a.complete(Ticket { call: 9, index: 0 }, true);
        assert_eq!(a.outcome(), b.outcome());
    }

    #[test]
    fn net_of_single_type_measure_has_one_member() {
        let mut k = consts(1.0);
        k.scale.similar = 0.05;
        let mut o = single_type_oracle(30, 4);
        let net = get_net(0.2, 0.1, &k, &mut o).unwrap();
        assert_eq!(net.members.len(), 1);
        assert_eq!(net.stop, NetStop::MaxWait);
        assert!(net.draws as f64 > net.max_wait);
    }

    #[test]
    fn split_examples() {
        let block: Vec<ItemId> = (0..100).map(ItemId).collect();
        let parts = split_block(block, 0.1);
        assert_eq!(parts.len(), 10);
        assert!(parts.iter().all(|p| p.len() == 10));
        let parts = split_block((0..11).map(ItemId).collect(), 0.1);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 5]);
        assert_eq!(split_block((0..10).map(ItemId).collect(), 0.1).len(), 1);
        // ⌈nε⌉ = 3 chunks would need a block of 4 > 1/0.3
        let parts = split_block((0..10).map(ItemId).collect(), 0.3);
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
    }

    #[test]
    fn partition_of_single_type_measure() {
        let mut k = consts(1.0);
        k.scale.similar = 0.02;
        let mut o = single_type_oracle(30, 2);
        let p = make_partition(100, 0.1, 0.1, &k, &mut o, 5).unwrap();
        assert_eq!(p.n_items(), 100);
        assert!(p.blocks.iter().all(|b| (5..=10).contains(&b.len())));
        assert!((10..=20).contains(&p.n_blocks()));
    }

    #[test]
    fn partition_with_zero_items_is_empty() {
        let mut o = single_type_oracle(10, 0);
        let p = make_partition(0, 0.1, 0.1, &consts(1.0), &mut o, 0).unwrap();
        assert!(p.blocks.is_empty());
        assert_eq!(o.queries(), 0);
    }

    #[test]
    fn partition_json_round_trip() {
        let mut k = consts(0.0);
        k.scale.similar = 0.02;
        let mut o = single_type_oracle(20, 2);
        let p = make_partition(12, 0.25, 0.2, &k, &mut o, 1).unwrap();
        let back: Partition = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    fn two_type_oracle(n: usize, seed: u64) -> SimOracle {
        let a = ItemType::from_likes(n, 0..n / 2);
        let b = ItemType::from_likes(n, n / 2..n);
        let m = ItemMeasure::FiniteMixture(FiniteMixture::uniform(n, vec![a, b]).unwrap());
        SimOracle::new(m, seed)
    }

    #[test]
    fn concurrent_net_keeps_one_member_per_type() {
        let mut k = consts(1.0);
        k.scale.similar = 0.05;
        for window in [1, 4, 32] {
            let mut o = two_type_oracle(40, window as u64);
            let mut b = NetBuilder::new(0.2, 0.1, &k).unwrap().with_concurrency(window);
            run_to_completion(&mut b, &mut o).unwrap();
            let net = b.result().unwrap();
            let types: Vec<_> = net.members.iter().map(|&i| o.item_type(i).unwrap().like_count()).collect();
            assert_eq!(net.members.len(), 2, "window {window}");
            assert_ne!(o.item_type(net.members[0]), o.item_type(net.members[1]), "{types:?}");
        }
    }

    #[test]
    fn concurrent_partition_separates_types() {
        let mut k = consts(1.0);
        k.scale.similar = 0.004;
        let mut o = two_type_oracle(40, 3);
        let mut b = PartitionBuilder::new(60, 0.1, 0.1, &k, 1).unwrap().with_concurrency(16);
        run_to_completion(&mut b, &mut o).unwrap();
        let p = b.result().unwrap();
        assert_eq!(p.n_items(), 60);
        for block in &p.blocks {
            let first = o.item_type(block[0]).unwrap();
            assert!(block.iter().all(|&i| o.item_type(i).unwrap() == first));
        }
    }

    #[test]
    fn window_one_matches_default() {
        let mut k = consts(1.0);
        k.scale.similar = 0.004;
        let run = |window: Option<usize>| {
            let mut o = two_type_oracle(40, 9);
            let mut b = PartitionBuilder::new(30, 0.1, 0.1, &k, 2).unwrap();
            if let Some(w) = window {
                b = b.with_concurrency(w);
            }
            run_to_completion(&mut b, &mut o).unwrap();
            (b.sample_users(), b.into_result().unwrap())
        };
        assert_eq!(run(None), run(Some(1)));
    }

    #[test]
    fn open_for_prefers_a_half_known_test() {
        let mut k = consts(1.0);
        k.scale.similar = 0.02;
        let mut o = two_type_oracle(40, 1);
        let mut b = NetBuilder::new(0.2, 0.1, &k).unwrap().with_concurrency(8);
        let Stage::Test { .. } = b.advance(&mut o).unwrap() else { panic!() };
        // the speculative candidates all face member 0; know one of them
        let target = *b.drawn().last().unwrap();
        let (_, first, second) = b.open_for(7, &|i| i == target).unwrap();
        assert!(first == target || second == target);
        // nobody known: the earliest open test is used
        let (_, first, _) = b.open_for(8, &|_| false).unwrap();
        assert_eq!(first, b.drawn()[1]);
    }
}
