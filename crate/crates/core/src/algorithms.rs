//! Recommenders: the epoch-based item-item algorithm and the random, oracle
//! and user-user baselines.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::engine::{Choice, EngineError, ExploreDriver, ExploreOutcome, Phase, Recommender, Result, StepContext};
use crate::itemspace::{Feedback, ItemId, ItemMeasure, UserId};
use crate::rng::{derive_rng, mix_seed, stream, SimRng};
use crate::similarity::{Partition, PartitionBuilder, ScaleKnobs, TheoryConstants};

/// `(ε_τ, M_τ, D_τ)` for epoch τ.
pub fn epoch_schedule(consts: &TheoryConstants, tau: u32) -> (f64, f64, f64) {
    (consts.eps_tau(tau), consts.m_tau(tau), consts.d_tau(tau))
}

/// Recommends a fresh item drawn from μ at every step.
#[derive(Clone, Debug, Default)]
pub struct RandomRecommender;

impl Recommender for RandomRecommender {
    fn name(&self) -> &'static str {
        "random"
    }

    fn recommend(&mut self, _user: UserId, ctx: &mut StepContext<'_>) -> Result<Choice> {
        Ok(Choice {
            item: ctx.fresh_item(),
            phase: Phase::Fallback,
        })
    }

    fn observe(&mut self, _: UserId, _: ItemId, _: Feedback) {}
}

/// All-knowing baseline that reads hidden preferences. Test use only.
///
/// Every introduced item is filed under the users who like it; a user with
/// an empty pool gets fresh items introduced until one they like appears.
#[derive(Clone, Debug)]
pub struct OracleRecommender {
    pools: Vec<Vec<ItemId>>,
    no_like_mass: Vec<UserId>,
    flagged: FxHashSet<UserId>,
    max_draws: u32,
}

impl OracleRecommender {
    pub fn new(measure: &ItemMeasure) -> Self {
        let n = measure.n_users();
        let no_like_mass = match measure.as_finite() {
            Some(m) => m
                .user_like_mass()
                .iter()
                .enumerate()
                .filter(|(_, &p)| p <= 0.0)
                .map(|(u, _)| u as UserId)
                .collect(),
            None => Vec::new(),
        };
        OracleRecommender {
            pools: vec![Vec::new(); n],
            no_like_mass,
            flagged: FxHashSet::default(),
            max_draws: 1_000_000,
        }
    }

    /// Users μ gives zero like mass; no algorithm can avoid regret for them.
    pub fn impossible_users(&self) -> &[UserId] {
        &self.no_like_mass
    }

    /// Users that actually received a disliked recommendation.
    pub fn flagged(&self) -> Vec<UserId> {
        let mut v: Vec<_> = self.flagged.iter().copied().collect();
        v.sort_unstable();
        v
    }

    fn introduce(&mut self, ctx: &mut StepContext<'_>) -> ItemId {
        let item = ctx.fresh_item();
        let ty = ctx.peek(item).expect("oracle runs with hidden access");
        for u in ty.likers() {
            self.pools[u].push(item);
        }
        item
    }
}

impl Recommender for OracleRecommender {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn needs_hidden(&self) -> bool {
        true
    }

    fn recommend(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Result<Choice> {
        let u = user as usize;
        while let Some(item) = self.pools[u].pop() {
            if !ctx.ledger.has_rated(user, item) {
                return Ok(Choice {
                    item,
                    phase: Phase::Exploit,
                });
            }
        }
        if self.no_like_mass.binary_search(&user).is_err() {
            for _ in 0..self.max_draws {
                let item = self.introduce(ctx);
                if let Some(top) = self.pools[u].pop() {
                    debug_assert_eq!(top, item);
                    return Ok(Choice {
                        item: top,
                        phase: Phase::Exploit,
                    });
                }
            }
        }
        self.flagged.insert(user);
        Ok(Choice {
            item: ctx.fresh_item(),
            phase: Phase::Fallback,
        })
    }

    fn observe(&mut self, _: UserId, _: ItemId, _: Feedback) {}
}

/// What to do when an epoch ends before its partition is ready.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// Keep exploiting the old partition and keep building; install the late
    /// partition as soon as it finishes.
    #[default]
    FinishAtBoundary,
    /// Drop the unfinished build and reuse the old partition for the new epoch.
    ReusePrevious,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemItemConfig {
    #[serde(default)]
    pub boundary: BoundaryPolicy,
    /// Sample exploit blocks with replacement (sensitivity check only).
    #[serde(default)]
    pub block_replacement: bool,
    /// SIMILAR calls allowed to take samples at once; 1 is sequential.
    #[serde(default = "one")]
    pub concurrency: usize,
}

fn one() -> usize {
    1
}

impl Default for ItemItemConfig {
    fn default() -> Self {
        ItemItemConfig {
            boundary: BoundaryPolicy::FinishAtBoundary,
            block_replacement: false,
            concurrency: 1,
        }
    }
}

/// Counters kept by [`ItemItem`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemItemStats {
    pub explore: u64,
    pub exploit: u64,
    pub fallback: u64,
    pub replays: u64,
    /// Epoch boundaries reached before the next partition was ready.
    pub late_partitions: u64,
    /// Epoch boundaries reached, excluding the end of cold start.
    pub boundaries: u64,
    /// Step at which the cold-start partition was installed.
    pub cold_start_steps: Option<u64>,
    pub installed: Vec<InstalledPartition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstalledPartition {
    pub epoch: u32,
    pub step: u64,
    pub blocks: usize,
    pub items: usize,
}

#[derive(Clone, Debug, Default)]
struct Cursor {
    generation: u64,
    queue: VecDeque<ItemId>,
    unsampled: Vec<u32>,
}

#[derive(Copy, Clone, Debug)]
enum Pending {
    Explore,
    Sample { block: u32 },
    Queue,
    Fallback,
}

/// The epoch-based item-item algorithm.
///
/// Epoch 0 is the cold start: every recommendation serves MAKE-PARTITION
/// (or a fresh item while it waits on users). From epoch 1 on, each step
/// explores with probability `ε_τ` (times the explore scale) to build the
/// next partition, and otherwise exploits the current one.
pub struct ItemItem {
    consts: TheoryConstants,
    cfg: ItemItemConfig,
    seed: u64,
    rng: SimRng,
    tau: u32,
    steps_left: u64,
    step: u64,
    current: Option<Arc<Partition>>,
    generation: u64,
    driver: Option<ExploreDriver>,
    ready: Option<Partition>,
    cursors: Vec<Cursor>,
    pending: Option<(UserId, ItemId, Pending)>,
    stats: ItemItemStats,
}

impl ItemItem {
    pub fn new(consts: TheoryConstants, cfg: ItemItemConfig, seed: u64) -> Result<Self> {
        let n = consts.n_users;
        let mut algo = ItemItem {
            rng: derive_rng(seed, stream::ALGORITHM),
            consts,
            cfg,
            seed,
            tau: 0,
            steps_left: 0,
            step: 0,
            current: None,
            generation: 0,
            driver: None,
            ready: None,
            cursors: vec![Cursor::default(); n],
            pending: None,
            stats: ItemItemStats::default(),
        };
        algo.driver = Some(algo.new_driver(1)?);
        Ok(algo)
    }

    pub fn constants(&self) -> &TheoryConstants {
        &self.consts
    }

    pub fn stats(&self) -> &ItemItemStats {
        &self.stats
    }

    pub fn current_partition(&self) -> Option<&Partition> {
        self.current.as_deref()
    }

    pub fn driver(&self) -> Option<&ExploreDriver> {
        self.driver.as_ref()
    }

    fn new_driver(&self, target: u32) -> Result<ExploreDriver> {
        let eps = self.consts.eps_tau(target);
        let m = self.consts.items_in_epoch(target);
        let builder = PartitionBuilder::new(m, eps, eps.min(0.5), &self.consts, mix_seed(self.seed, target as u64))?
            .with_concurrency(self.cfg.concurrency);
        Ok(ExploreDriver::new(builder, target))
    }

    fn install(&mut self, partition: Partition, epoch: u32) {
        self.stats.installed.push(InstalledPartition {
            epoch,
            step: self.step,
            blocks: partition.n_blocks(),
            items: partition.n_items(),
        });
        self.current = Some(Arc::new(partition));
        self.generation += 1;
    }

    fn begin_epoch(&mut self, tau: u32) {
        self.tau = tau;
        self.steps_left = self.consts.epoch_steps(tau).max(1);
    }

    /// Notices a finished build and installs or parks its partition.
    fn collect_driver(&mut self, ctx: &mut StepContext<'_>) -> Result<()> {
        let Some(driver) = self.driver.as_mut() else {
            return Ok(());
        };
        driver.settle(ctx)?;
        if !driver.is_finished() {
            return Ok(());
        }
        let driver = self.driver.take().expect("present");
        let target = driver.target_epoch();
        let partition = driver.into_partition().expect("finished");
        if self.tau == 0 {
            self.stats.cold_start_steps = Some(self.step);
            self.install(partition, 1);
            self.begin_epoch(1);
            self.driver = Some(self.new_driver(2)?);
        } else if target <= self.tau {
            // late partition for the running epoch
            self.install(partition, target);
            self.driver = Some(self.new_driver(self.tau + 1)?);
        } else {
            self.ready = Some(partition);
        }
        Ok(())
    }

    fn end_epoch(&mut self) -> Result<()> {
        self.stats.boundaries += 1;
        let next = self.tau + 1;
        match self.ready.take() {
            Some(p) => {
                self.install(p, next);
                self.begin_epoch(next);
                self.driver = Some(self.new_driver(next + 1)?);
            }
            None => {
                self.stats.late_partitions += 1;
                self.begin_epoch(next);
                match self.cfg.boundary {
                    BoundaryPolicy::FinishAtBoundary => {}
                    BoundaryPolicy::ReusePrevious => {
                        self.driver = Some(self.new_driver(next + 1)?);
                    }
                }
            }
        }
        Ok(())
    }

    fn explore(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Result<Option<ItemId>> {
        let Some(driver) = self.driver.as_mut() else {
            return Ok(None);
        };
        match driver.serve(user, ctx)? {
            ExploreOutcome::Recommend(item) => Ok(Some(item)),
            ExploreOutcome::Replayed => {
                self.stats.replays += 1;
                Ok(None)
            }
            ExploreOutcome::Exhausted => Ok(None),
        }
    }

    fn exploit(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Option<(ItemId, Pending)> {
        let partition = self.current.as_ref()?;
        let cursor = &mut self.cursors[user as usize];
        if cursor.generation != self.generation {
            cursor.generation = self.generation;
            cursor.queue.clear();
            cursor.unsampled = (0..partition.blocks.len() as u32).collect();
        }
        while let Some(item) = cursor.queue.pop_front() {
            if !ctx.ledger.has_rated(user, item) {
                return Some((item, Pending::Queue));
            }
        }
        if self.cfg.block_replacement {
            let open: Vec<u32> = (0..partition.blocks.len() as u32)
                .filter(|&b| partition.blocks[b as usize].iter().any(|&i| !ctx.ledger.has_rated(user, i)))
                .collect();
            if open.is_empty() {
                return None;
            }
            let block = open[self.rng.gen_range(0..open.len())];
            let item = pick_unrated(&partition.blocks[block as usize], user, ctx, &mut self.rng)?;
            return Some((item, Pending::Sample { block }));
        }
        while !cursor.unsampled.is_empty() {
            let k = self.rng.gen_range(0..cursor.unsampled.len());
            let block = cursor.unsampled.swap_remove(k);
            if let Some(item) = pick_unrated(&partition.blocks[block as usize], user, ctx, &mut self.rng) {
                return Some((item, Pending::Sample { block }));
            }
        }
        None
    }
}

fn pick_unrated(block: &[ItemId], user: UserId, ctx: &StepContext<'_>, rng: &mut SimRng) -> Option<ItemId> {
    let open: Vec<ItemId> = block.iter().copied().filter(|&i| !ctx.ledger.has_rated(user, i)).collect();
    if open.is_empty() {
        None
    } else {
        Some(open[rng.gen_range(0..open.len())])
    }
}

impl Recommender for ItemItem {
    fn name(&self) -> &'static str {
        "item_item"
    }

    fn epoch(&self) -> u32 {
        self.tau
    }

    fn recommend(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Result<Choice> {
        self.collect_driver(ctx)?;
        if self.tau > 0 && self.steps_left == 0 {
            self.end_epoch()?;
            self.collect_driver(ctx)?;
        }
        self.step += 1;
        if self.tau > 0 {
            self.steps_left -= 1;
        }

        let pinned = self.driver.as_ref().is_some_and(|d| d.has_pin(user));
        let explore_turn = pinned || self.tau == 0 || {
            let p = self.consts.explore_prob(self.tau);
            self.rng.gen::<f64>() < p
        };
        let mut choice = None;
        if explore_turn {
            if let Some(item) = self.explore(user, ctx)? {
                choice = Some((item, Pending::Explore));
            }
        }
        if choice.is_none() {
            choice = self.exploit(user, ctx);
        }
        let (item, pending) = match choice {
            Some(c) => c,
            None => (ctx.fresh_item(), Pending::Fallback),
        };
        let phase = match pending {
            Pending::Explore => {
                self.stats.explore += 1;
                Phase::Explore
            }
            Pending::Sample { .. } | Pending::Queue => {
                self.stats.exploit += 1;
                Phase::Exploit
            }
            Pending::Fallback => {
                self.stats.fallback += 1;
                Phase::Fallback
            }
        };
        self.pending = Some((user, item, pending));
        Ok(Choice { item, phase })
    }

    fn observe(&mut self, user: UserId, item: ItemId, feedback: Feedback) {
        let Some((u, i, pending)) = self.pending.take() else {
            return;
        };
        if u != user || i != item {
            return;
        }
        match pending {
            Pending::Explore => {
                if let Some(d) = self.driver.as_mut() {
                    d.feedback(user, item, feedback);
                }
            }
            Pending::Sample { block } if feedback.is_like() => {
                if let Some(p) = &self.current {
                    let cursor = &mut self.cursors[user as usize];
                    cursor.queue.clear();
                    cursor
                        .queue
                        .extend(p.blocks[block as usize].iter().copied().filter(|&x| x != item));
                }
            }
            _ => {}
        }
    }
}

/// Smallest `q` with `(K−1)/K · (1−0.2ν)^q ≤ 1/K`.
pub fn user_user_min_agreements(k: usize, nu: f64) -> u32 {
    if k <= 2 {
        return 0;
    }
    let q = ((k - 1) as f64).ln() / -(1.0 - 0.2 * nu).ln();
    let mut n = q.ceil().max(0.0) as u32;
    // guard the ceiling against rounding right at an integer
    while n > 0 && map_accepts(k, nu, n - 1) {
        n -= 1;
    }
    while !map_accepts(k, nu, n) {
        n += 1;
    }
    n
}

fn map_accepts(k: usize, nu: f64, q: u32) -> bool {
    let k = k as f64;
    (k - 1.0) / k * (1.0 - 0.2 * nu).powi(q as i32) <= 1.0 / k
}

#[derive(Clone, Debug)]
struct Candidate {
    user: UserId,
    agreements: u32,
    /// Position in the candidate's history up to which common ratings are counted.
    scanned: usize,
}

#[derive(Clone, Debug, Default)]
struct UserState {
    neighbors: Vec<(UserId, usize)>,
    candidate: Option<Candidate>,
    tried: FxHashSet<UserId>,
}

#[derive(Copy, Clone, Debug)]
enum UserPending {
    Test,
    Neighbor { neighbor: UserId, rating: Feedback },
    Fresh,
}

/// User-user baseline following the cluster-membership argument.
///
/// Each user tests one candidate neighbor at a time on the candidate's liked
/// items, in the candidate's rating order; items both users already rated
/// count too, whatever the rating. The first disagreement rejects the
/// candidate; `q` agreements accept it, where `q` is the least count for
/// which the MAP rule favours "same cluster" among `K` clusters. Accepted
/// neighbors' liked items are then recommended; a neighbor is dropped on the
/// first disagreement. When nothing is left to recommend, a fresh item is used.
pub struct UserUser {
    k: usize,
    nu: f64,
    q_required: u32,
    n_users: usize,
    states: Vec<UserState>,
    rng: SimRng,
    pending: Option<(UserId, ItemId, UserPending)>,
    accepted: u64,
    rejected: u64,
}

impl UserUser {
    pub fn new(k: usize, nu: f64, n_users: usize, seed: u64) -> Self {
        let q_required = user_user_min_agreements(k, nu).max(1);
        UserUser {
            k,
            nu,
            q_required,
            n_users,
            states: vec![UserState::default(); n_users],
            rng: derive_rng(seed, stream::ALGORITHM),
            pending: None,
            accepted: 0,
            rejected: 0,
        }
    }

    pub fn q_required(&self) -> u32 {
        self.q_required
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn neighbors(&self, user: UserId) -> Vec<UserId> {
        self.states[user as usize].neighbors.iter().map(|(v, _)| *v).collect()
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    fn next_candidate(&mut self, user: UserId) -> Option<UserId> {
        let st = &self.states[user as usize];
        let untried = self.n_users - 1 - st.tried.len();
        if untried == 0 {
            return None;
        }
        // rejection sampling is fine while most users are untried
        if untried * 4 >= self.n_users {
            loop {
                let v = self.rng.gen_range(0..self.n_users as u32);
                if v != user && !st.tried.contains(&v) {
                    return Some(v);
                }
            }
        }
        let pool: Vec<UserId> = (0..self.n_users as u32)
            .filter(|&v| v != user && !st.tried.contains(&v))
            .collect();
        Some(pool[self.rng.gen_range(0..pool.len())])
    }

    fn accept_or_reject(&mut self, user: UserId, agree: bool) {
        let q = self.q_required;
        let st = &mut self.states[user as usize];
        let Some(c) = st.candidate.as_mut() else {
            return;
        };
        if !agree {
            st.tried.insert(c.user);
            st.candidate = None;
            self.rejected += 1;
        } else {
            c.agreements += 1;
            if c.agreements >= q {
                let v = c.user;
                st.tried.insert(v);
                st.neighbors.push((v, 0));
                st.candidate = None;
                self.accepted += 1;
            }
        }
    }

    /// Counts common ratings with the candidate as they appear in the
    /// ledger, then returns the candidate's next item the user has not rated.
    /// `None` means there is nothing to test right now.
    fn candidate_test(&mut self, user: UserId, ctx: &StepContext<'_>) -> Option<(ItemId, UserId, Feedback)> {
        loop {
            if self.states[user as usize].candidate.is_none() {
                let v = self.next_candidate(user)?;
                self.states[user as usize].candidate = Some(Candidate {
                    user: v,
                    agreements: 0,
                    scanned: 0,
                });
            }
            let Candidate { user: v, scanned, .. } = *self.states[user as usize].candidate.as_ref().expect("set above");
            let history = ctx.ledger.history(v);
            let Some(&(item, rating)) = history.get(scanned) else {
                return None;
            };
            match ctx.ledger.rating(user, item) {
                None if rating.is_like() => return Some((item, v, rating)),
                None => {
                    // only the candidate's likes are worth a recommendation
                    if let Some(c) = self.states[user as usize].candidate.as_mut() {
                        c.scanned += 1;
                    }
                }
                Some(mine) => {
                    if let Some(c) = self.states[user as usize].candidate.as_mut() {
                        c.scanned += 1;
                    }
                    self.accept_or_reject(user, mine == rating);
                    if mine == rating && self.states[user as usize].candidate.is_none() {
                        // just accepted; let the caller exploit the new neighbor
                        return None;
                    }
                }
            }
        }
    }

    fn neighbor_item(&mut self, user: UserId, ctx: &StepContext<'_>) -> Option<(ItemId, UserId, Feedback)> {
        let st = &mut self.states[user as usize];
        for (v, pos) in st.neighbors.iter_mut() {
            let history = ctx.ledger.history(*v);
            while *pos < history.len() {
                let (item, rating) = history[*pos];
                *pos += 1;
                if rating.is_like() && !ctx.ledger.has_rated(user, item) {
                    return Some((item, *v, rating));
                }
            }
        }
        None
    }
}

impl Recommender for UserUser {
    fn name(&self) -> &'static str {
        "user_user"
    }

    fn recommend(&mut self, user: UserId, ctx: &mut StepContext<'_>) -> Result<Choice> {
        if let Some((item, neighbor, rating)) = self.neighbor_item(user, ctx) {
            self.pending = Some((user, item, UserPending::Neighbor { neighbor, rating }));
            return Ok(Choice {
                item,
                phase: Phase::Exploit,
            });
        }
        if let Some((item, _, _)) = self.candidate_test(user, ctx) {
            self.pending = Some((user, item, UserPending::Test));
            return Ok(Choice {
                item,
                phase: Phase::Explore,
            });
        }
        // a just-accepted neighbor may have something to offer
        if let Some((item, neighbor, rating)) = self.neighbor_item(user, ctx) {
            self.pending = Some((user, item, UserPending::Neighbor { neighbor, rating }));
            return Ok(Choice {
                item,
                phase: Phase::Exploit,
            });
        }
        let item = ctx.fresh_item();
        self.pending = Some((user, item, UserPending::Fresh));
        Ok(Choice {
            item,
            phase: Phase::Fallback,
        })
    }

    fn observe(&mut self, user: UserId, item: ItemId, feedback: Feedback) {
        let Some((u, i, pending)) = self.pending.take() else {
            return;
        };
        if u != user || i != item {
            return;
        }
        match pending {
            // counted when the common rating is next scanned
            UserPending::Test => {}
            UserPending::Neighbor { neighbor, rating } => {
                if feedback != rating {
                    self.states[user as usize].neighbors.retain(|(v, _)| *v != neighbor);
                }
            }
            UserPending::Fresh => {}
        }
    }
}

/// Scale factors as a preset name or explicit knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleSpec {
    Preset(String),
    Knobs(ScaleKnobs),
}

impl Default for ScaleSpec {
    fn default() -> Self {
        ScaleSpec::Preset("paper".into())
    }
}

impl ScaleSpec {
    pub fn resolve(&self) -> Result<ScaleKnobs, String> {
        match self {
            ScaleSpec::Preset(name) => {
                ScaleKnobs::by_name(name).ok_or_else(|| format!("unknown scale preset {name:?} (expected paper or desk)"))
            }
            ScaleSpec::Knobs(k) => Ok(k.clone()),
        }
    }
}

/// Algorithm selection as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlgoConfig {
    ItemItem {
        d: f64,
        nu: f64,
        #[serde(default)]
        scale: ScaleSpec,
        #[serde(default)]
        boundary: BoundaryPolicy,
        #[serde(default)]
        block_replacement: bool,
        #[serde(default = "one")]
        concurrency: usize,
    },
    Random {},
    Oracle {},
    UserUser {
        #[serde(rename = "K")]
        k: usize,
        nu: f64,
    },
}

impl AlgoConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AlgoConfig::ItemItem { .. } => "item_item",
            AlgoConfig::Random {} => "random",
            AlgoConfig::Oracle {} => "oracle",
            AlgoConfig::UserUser { .. } => "user_user",
        }
    }

    /// Builds the recommender for one seeded run.
    pub fn build(&self, measure: &ItemMeasure, seed: u64) -> Result<Box<dyn Recommender>> {
        let n = measure.n_users();
        Ok(match self {
            AlgoConfig::ItemItem {
                d,
                nu,
                scale,
                boundary,
                block_replacement,
                concurrency,
            } => {
                let knobs = scale.resolve().map_err(EngineError::Algorithm)?;
                let consts = TheoryConstants::new(*d, *nu, n, knobs)?;
                let cfg = ItemItemConfig {
                    boundary: *boundary,
                    block_replacement: *block_replacement,
                    concurrency: *concurrency,
                };
                Box::new(ItemItem::new(consts, cfg, seed)?)
            }
            AlgoConfig::Random {} => Box::new(RandomRecommender),
            AlgoConfig::Oracle {} => Box::new(OracleRecommender::new(measure)),
            AlgoConfig::UserUser { k, nu } => {
                if *k == 0 || !(*nu > 0.0 && *nu < 0.5) {
                    return Err(EngineError::Algorithm(format!("user_user needs K ≥ 1 and 0 < ν < 1/2, got K={k}, ν={nu}")));
                }
                Box::new(UserUser::new(*k, *nu, n, seed))
            }
        })
    }
}
