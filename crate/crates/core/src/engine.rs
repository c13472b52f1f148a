//! The online protocol: uniform user arrivals, recommendations, feedback and
//! the no-repeat ledger, plus the driver that interleaves MAKE-PARTITION work
//! into explore steps.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itemspace::{Feedback, ItemId, ItemMeasure, ItemType, UserId};
use crate::rng::{derive_rng, stream, SimRng};
use crate::similarity::{ItemSource, Partition, PartitionBuilder, Resumable, SimilarityError, Stage, Ticket};

/// Engine version recorded in traces; replay refuses traces from other versions.
pub const ENGINE_VERSION: &str = concat!("itemcf-engine/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("protocol violation at t={t}: item {item} was already recommended to user {user}")]
    ProtocolViolation { t: u64, user: UserId, item: ItemId },
    #[error("item {0} was never introduced")]
    UnknownItem(ItemId),
    #[error("recommender failure: {0}")]
    Algorithm(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error("audit error: {0}")]
    Audit(String),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Why a recommendation was made.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Explore,
    Exploit,
    Fallback,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Explore => "explore",
            Phase::Exploit => "exploit",
            Phase::Fallback => "fallback",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "explore" => Some(Phase::Explore),
            "exploit" => Some(Phase::Exploit),
            "fallback" => Some(Phase::Fallback),
            _ => None,
        }
    }
}

/// Per-user record of every rating given so far.
#[derive(Clone, Debug, Default)]
pub struct Ledger {
    rated: Vec<FxHashMap<ItemId, Feedback>>,
    history: Vec<Vec<(ItemId, Feedback)>>,
    total: u64,
}

impl Ledger {
    pub fn new(n_users: usize) -> Self {
        Ledger {
            rated: vec![FxHashMap::default(); n_users],
            history: vec![Vec::new(); n_users],
            total: 0,
        }
    }

    #[inline]
    pub fn rating(&self, user: UserId, item: ItemId) -> Option<Feedback> {
        self.rated[user as usize].get(&item).copied()
    }

    #[inline]
    pub fn has_rated(&self, user: UserId, item: ItemId) -> bool {
        self.rated[user as usize].contains_key(&item)
    }

    /// Ratings of `user` in the order they were given.
    pub fn history(&self, user: UserId) -> &[(ItemId, Feedback)] {
        &self.history[user as usize]
    }

    pub fn n_rated(&self, user: UserId) -> usize {
        self.history[user as usize].len()
    }

    pub fn len(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn record(&mut self, user: UserId, item: ItemId, feedback: Feedback) -> bool {
        let fresh = self.rated[user as usize].insert(item, feedback).is_none();
        if fresh {
            self.history[user as usize].push((item, feedback));
            self.total += 1;
        }
        fresh
    }
}

/// Items introduced so far, with their hidden types.
#[derive(Clone, Debug)]
pub struct ItemStore {
    measure: Arc<ItemMeasure>,
    types: Vec<Arc<ItemType>>,
    rng: SimRng,
}

impl ItemStore {
    fn introduce(&mut self) -> ItemId {
        let ty = self.measure.sample_item(&mut self.rng);
        self.types.push(ty);
        ItemId(self.types.len() as u32 - 1)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }
}

/// What a recommender may see and do during one step.
///
/// Only the ledger and the ability to introduce fresh items are exposed;
/// hidden types are reachable only when the engine was built with hidden
/// access, which is reserved for the oracle baseline.
pub struct StepContext<'a> {
    pub ledger: &'a Ledger,
    store: &'a mut ItemStore,
    hidden: bool,
    pub t: u64,
    pub n_users: usize,
}

impl<'a> StepContext<'a> {
    /// Introduces a new item drawn from μ.
    pub fn fresh_item(&mut self) -> ItemId {
        self.store.introduce()
    }

    pub fn n_items(&self) -> usize {
        self.store.len()
    }

    /// Hidden type of an item; `None` unless hidden access was granted.
    pub fn peek(&self, item: ItemId) -> Option<&Arc<ItemType>> {
        if self.hidden {
            self.store.types.get(item.index())
        } else {
            None
        }
    }
}

impl ItemSource for StepContext<'_> {
    fn draw_item(&mut self) -> Result<ItemId, SimilarityError> {
        Ok(self.fresh_item())
    }
}

/// A recommendation and the reason it was made.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Choice {
    pub item: ItemId,
    pub phase: Phase,
}

/// Common interface of every recommendation algorithm.
pub trait Recommender: Send {
    fn name(&self) -> &'static str;
    /// Picks an item `user` has not rated yet.
    fn recommend(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Result<Choice>;
    fn observe(&mut self, user: UserId, item: ItemId, feedback: Feedback);
    /// Current epoch, for algorithms that have one.
    fn epoch(&self) -> u32 {
        0
    }
    /// Whether the algorithm reads hidden preferences (test baselines only).
    fn needs_hidden(&self) -> bool {
        false
    }
}

/// One line of a run trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub user: UserId,
    pub item: ItemId,
    pub feedback: Feedback,
    pub phase: Phase,
    pub epoch: u32,
}

/// Hidden preference matrix, arrival stream and ledger of one run.
pub struct Environment {
    n_users: usize,
    seed: u64,
    store: ItemStore,
    ledger: Ledger,
    arrivals: SimRng,
    clock: u64,
    dislikes: u64,
}

impl Environment {
    pub fn new(measure: Arc<ItemMeasure>, seed: u64) -> Self {
        let n_users = measure.n_users();
        Environment {
            n_users,
            seed,
            store: ItemStore {
                measure,
                types: Vec::new(),
                rng: derive_rng(seed, stream::ITEMS),
            },
            ledger: Ledger::new(n_users),
            arrivals: derive_rng(seed, stream::ARRIVALS),
            clock: 0,
            dislikes: 0,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Dislikes counted online, used to cross-check trace-derived regret.
    pub fn dislikes(&self) -> u64 {
        self.dislikes
    }

    pub fn n_items(&self) -> usize {
        self.store.len()
    }

    pub fn item_type(&self, item: ItemId) -> Option<&Arc<ItemType>> {
        self.store.types.get(item.index())
    }

    pub fn measure(&self) -> &ItemMeasure {
        &self.store.measure
    }

    /// One recommendation to a uniformly random user.
    pub fn step(&mut self, algo: &mut dyn Recommender) -> Result<TraceRecord> {
        let user = self.arrivals.gen_range(0..self.n_users as u32);
        self.step_for(user, algo)
    }

    /// One recommendation to a given user; the arrival stream is not advanced.
    pub fn step_for(&mut self, user: UserId, algo: &mut dyn Recommender) -> Result<TraceRecord> {
        let t = self.clock + 1;
        let mut ctx = StepContext {
            ledger: &self.ledger,
            store: &mut self.store,
            hidden: algo.needs_hidden(),
            t,
            n_users: self.n_users,
        };
        let choice = algo.recommend(user, &mut ctx)?;
        let ty = self.store.types.get(choice.item.index()).ok_or(EngineError::UnknownItem(choice.item))?;
        let feedback = ty.pref(user as usize);
        if !self.ledger.record(user, choice.item, feedback) {
            return Err(EngineError::ProtocolViolation {
                t,
                user,
                item: choice.item,
            });
        }
        self.clock = t;
        if !feedback.is_like() {
            self.dislikes += 1;
        }
        algo.observe(user, choice.item, feedback);
        Ok(TraceRecord {
            t,
            user,
            item: choice.item,
            feedback,
            phase: choice.phase,
            epoch: algo.epoch(),
        })
    }

    /// Runs `horizon·N` steps, handing each record to `sink`.
    pub fn run_with(
        &mut self,
        algo: &mut dyn Recommender,
        horizon: u64,
        mut sink: impl FnMut(&TraceRecord),
    ) -> Result<()> {
        let steps = horizon * self.n_users as u64;
        for _ in 0..steps {
            let rec = self.step(algo)?;
            sink(&rec);
        }
        Ok(())
    }
}

/// Time-ordered record of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub version: String,
    pub seed: u64,
    pub n_users: usize,
    pub horizon: u64,
    pub records: Vec<TraceRecord>,
}

/// Executes `horizon·N` steps from a fresh environment.
pub fn run(measure: Arc<ItemMeasure>, algo: &mut dyn Recommender, seed: u64, horizon: u64) -> Result<RunTrace> {
    let mut env = Environment::new(measure, seed);
    let mut records = Vec::with_capacity((horizon * env.n_users() as u64).min(1 << 24) as usize);
    env.run_with(algo, horizon, |r| records.push(r.clone()))?;
    Ok(RunTrace {
        version: ENGINE_VERSION.to_string(),
        seed,
        n_users: env.n_users(),
        horizon,
        records,
    })
}

pub const TRACE_HEADER: [&str; 6] = ["t", "user", "item", "feedback", "phase", "epoch"];

impl RunTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.user.to_string(),
                r.item.to_string(),
                r.feedback.value().to_string(),
                r.phase.as_str().to_string(),
                r.epoch.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads records written by [`RunTrace::write_csv`]; run metadata comes from the manifest.
    pub fn read_csv<R: Read>(input: R, manifest: &TraceManifest) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header = rd.headers()?.clone();
        if header.iter().ne(TRACE_HEADER) {
            return Err(EngineError::Trace(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut records = Vec::new();
        for (i, row) in rd.records().enumerate() {
            let row = row?;
            let line = i + 2;
            let bad = |what: &str| EngineError::Trace(format!("line {line}: bad {what}"));
            let field = |k: usize| row.get(k).ok_or_else(|| bad(TRACE_HEADER[k]));
            records.push(TraceRecord {
                t: field(0)?.parse().map_err(|_| bad("t"))?,
                user: field(1)?.parse().map_err(|_| bad("user"))?,
                item: ItemId(field(2)?.parse().map_err(|_| bad("item"))?),
                feedback: field(3)?
                    .parse::<i64>()
                    .ok()
                    .and_then(Feedback::from_value)
                    .ok_or_else(|| bad("feedback"))?,
                phase: Phase::parse(field(4)?).ok_or_else(|| bad("phase"))?,
                epoch: field(5)?.parse().map_err(|_| bad("epoch"))?,
            });
        }
        Ok(RunTrace {
            version: manifest.engine_version.clone(),
            seed: manifest.seed,
            n_users: manifest.n_users,
            horizon: manifest.horizon,
            records,
        })
    }

    pub fn manifest(&self, config_hash: &str, measure: &str, algo: serde_json::Value) -> TraceManifest {
        TraceManifest {
            engine_version: self.version.clone(),
            seed: self.seed,
            config_hash: config_hash.to_string(),
            measure: measure.to_string(),
            algo,
            n_users: self.n_users,
            horizon: self.horizon,
            records: self.records.len() as u64,
        }
    }
}

/// Metadata written as JSON next to each trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub engine_version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Path of the measure spec, or the inline spec itself.
    pub measure: String,
    pub algo: serde_json::Value,
    pub n_users: usize,
    pub horizon: u64,
    pub records: u64,
}

/// First point where a replayed run disagrees with a stored trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub t: u64,
    pub expected: Option<TraceRecord>,
    pub actual: Option<TraceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records_checked: u64,
    pub first_divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_identical(&self) -> bool {
        self.first_divergence.is_none()
    }
}

/// Re-executes the run a trace claims to come from and compares record by record.
pub fn replay(trace: &RunTrace, measure: Arc<ItemMeasure>, algo: &mut dyn Recommender) -> Result<ReplayReport> {
    if trace.version != ENGINE_VERSION {
        return Err(EngineError::Audit(format!(
            "trace written by {}, this is {}",
            trace.version, ENGINE_VERSION
        )));
    }
    if measure.n_users() != trace.n_users {
        return Err(EngineError::Audit(format!(
            "trace has {} users, measure has {}",
            trace.n_users,
            measure.n_users()
        )));
    }
    let mut env = Environment::new(measure, trace.seed);
    let steps = trace.horizon * trace.n_users as u64;
    let mut checked = 0;
    for k in 0..steps {
        let actual = env.step(algo)?;
        let expected = trace.records.get(k as usize);
        if expected != Some(&actual) {
            return Ok(ReplayReport {
                records_checked: checked,
                first_divergence: Some(Divergence {
                    t: actual.t,
                    expected: expected.cloned(),
                    actual: Some(actual),
                }),
            });
        }
        checked += 1;
    }
    if let Some(extra) = trace.records.get(steps as usize) {
        return Ok(ReplayReport {
            records_checked: checked,
            first_divergence: Some(Divergence {
                t: extra.t,
                expected: Some(extra.clone()),
                actual: None,
            }),
        });
    }
    Ok(ReplayReport {
        records_checked: checked,
        first_divergence: None,
    })
}

/// Result of offering an arrival to the explore driver.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ExploreOutcome {
    /// Recommend this item; its feedback must be passed to [`ExploreDriver::feedback`].
    Recommend(ItemId),
    /// The arrival's sample was answered entirely from the ledger.
    Replayed,
    /// Nothing to rate: the driver is waiting on other users or finished.
    Exhausted,
}

#[derive(Clone, Debug)]
struct HalfSample {
    ticket: Ticket,
    first: ItemId,
    second: ItemId,
    first_fb: Option<Feedback>,
    second_fb: Option<Feedback>,
}

impl HalfSample {
    fn fill_from(&mut self, ledger: &Ledger, user: UserId) {
        if self.first_fb.is_none() {
            self.first_fb = ledger.rating(user, self.first);
        }
        if self.second_fb.is_none() {
            self.second_fb = ledger.rating(user, self.second);
        }
    }

    fn answers(&self) -> Option<(Feedback, Feedback)> {
        Some((self.first_fb?, self.second_fb?))
    }

    fn missing(&self) -> ItemId {
        if self.first_fb.is_none() {
            self.first
        } else {
            self.second
        }
    }
}

/// MAKE-PARTITION executed one arriving user at a time.
///
/// Each arrival routed to explore provides one user sample for the pending
/// SIMILAR call. Answers the ledger already holds are replayed instead of
/// re-recommended. A sample whose two items are both new to the user takes
/// two of that user's arrivals; the second item is pinned to the user and
/// served at their next arrival.
#[derive(Clone, Debug)]
pub struct ExploreDriver {
    builder: PartitionBuilder,
    target_epoch: u32,
    pins: FxHashMap<UserId, HalfSample>,
    recommendations: u64,
    replays: u64,
}

impl ExploreDriver {
    pub fn new(builder: PartitionBuilder, target_epoch: u32) -> Self {
        ExploreDriver {
            builder,
            target_epoch,
            pins: FxHashMap::default(),
            recommendations: 0,
            replays: 0,
        }
    }

    pub fn target_epoch(&self) -> u32 {
        self.target_epoch
    }

    pub fn has_pin(&self, user: UserId) -> bool {
        self.pins.contains_key(&user)
    }

    pub fn is_finished(&self) -> bool {
        self.builder.is_finished()
    }

    pub fn builder(&self) -> &PartitionBuilder {
        &self.builder
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.builder.result()
    }

    pub fn into_partition(self) -> Option<Partition> {
        self.builder.into_result()
    }

    /// Explore recommendations made so far.
    pub fn recommendations(&self) -> u64 {
        self.recommendations
    }

    /// Samples answered from the ledger alone.
    pub fn replays(&self) -> u64 {
        self.replays
    }

    pub fn serve(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Result<ExploreOutcome> {
        if let Some(mut half) = self.pins.remove(&user) {
            half.fill_from(ctx.ledger, user);
            match half.answers() {
                Some((a, b)) => self.builder.complete(half.ticket, a, b),
                None => {
                    let item = half.missing();
                    self.pins.insert(user, half);
                    self.recommendations += 1;
                    return Ok(ExploreOutcome::Recommend(item));
                }
            }
        }
        if let Stage::Finished = self.builder.advance(ctx)? {
            return Ok(ExploreOutcome::Exhausted);
        }
        let ledger = ctx.ledger;
        match self.builder.open_for(user, &|i| ledger.has_rated(user, i)) {
            Some((ticket, first, second)) => {
                let mut half = HalfSample {
                    ticket,
                    first,
                    second,
                    first_fb: None,
                    second_fb: None,
                };
                half.fill_from(ctx.ledger, user);
                match half.answers() {
                    Some((a, b)) => {
                        self.builder.complete(ticket, a, b);
                        self.replays += 1;
                        // settle any bookkeeping the answer unblocks
                        self.builder.advance(ctx)?;
                        Ok(ExploreOutcome::Replayed)
                    }
                    None => {
                        let item = half.missing();
                        self.pins.insert(user, half);
                        self.recommendations += 1;
                        Ok(ExploreOutcome::Recommend(item))
                    }
                }
            }
            None => Ok(ExploreOutcome::Exhausted),
        }
    }

    /// Passes on the feedback for an item returned by [`ExploreDriver::serve`].
    pub fn feedback(&mut self, user: UserId, item: ItemId, feedback: Feedback) {
        let Some(half) = self.pins.get_mut(&user) else {
            return;
        };
        if half.first == item && half.first_fb.is_none() {
            half.first_fb = Some(feedback);
        } else if half.second == item && half.second_fb.is_none() {
            half.second_fb = Some(feedback);
        }
        if let Some((a, b)) = half.answers() {
            let ticket = half.ticket;
            self.pins.remove(&user);
            self.builder.complete(ticket, a, b);
        }
    }

    /// Runs bookkeeping that needs no feedback, so a finished build is noticed.
    pub fn settle(&mut self, ctx: &mut StepContext<'_>) -> Result<()> {
        self.builder.advance(ctx)?;
        Ok(())
    }
}
