//! Item types, item measures, the normalized Hamming metric, assumption
//! checks and an exact doubling-dimension oracle for finite-support measures.
//!
//! An item type is the column of ±1 preferences of every user for an item.
//! It is stored as a bitset where a set bit means "liked" (+1).

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_rng, stream, SimRng};

pub type UserId = u32;

/// Handle of an item materialized in an environment or oracle.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A single binary preference `L_{u,i}`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feedback {
    Like,
    Dislike,
}

impl Feedback {
    #[inline]
    pub fn from_like(like: bool) -> Self {
        if like {
            Feedback::Like
        } else {
            Feedback::Dislike
        }
    }

    #[inline]
    pub fn is_like(self) -> bool {
        self == Feedback::Like
    }

    /// The ±1 value used in the regret formula.
    #[inline]
    pub fn value(self) -> i8 {
        match self {
            Feedback::Like => 1,
            Feedback::Dislike => -1,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            1 => Some(Feedback::Like),
            -1 => Some(Feedback::Dislike),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ItemSpaceError {
    #[error("dimension mismatch: {left} users vs {right} users")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
    #[error("unsupported measure: {0}")]
    UnsupportedMeasure(&'static str),
    #[error("parameter {name} = {value} out of range ({expected})")]
    Parameter {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("infeasible construction: {0}")]
    Infeasible(String),
    #[error("malformed item type: {0}")]
    Parse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ItemSpaceError> = std::result::Result<T, E>;

/// Preference column of one item over `n_users` users.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ItemType {
    n_users: usize,
    words: Vec<u64>,
}

impl ItemType {
    /// Type disliked by every user.
    pub fn all_dislike(n_users: usize) -> Self {
        ItemType {
            n_users,
            words: vec![0; n_users.div_ceil(64)],
        }
    }

    pub fn from_likes<I: IntoIterator<Item = usize>>(n_users: usize, likers: I) -> Self {
        let mut ty = Self::all_dislike(n_users);
        for u in likers {
            ty.set(u, true);
        }
        ty
    }

    pub fn from_fn(n_users: usize, mut likes: impl FnMut(usize) -> bool) -> Self {
        Self::from_likes(n_users, (0..n_users).filter(|&u| likes(u)).collect::<Vec<_>>())
    }

    /// Builds a type from ±1 entries.
    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        let mut ty = Self::all_dislike(signs.len());
        for (u, &s) in signs.iter().enumerate() {
            match s {
                1 => ty.set(u, true),
                -1 => {}
                other => return Err(ItemSpaceError::Parse(format!("entry {u} is {other}, expected ±1"))),
            }
        }
        Ok(ty)
    }

    /// Parses a `'+'`/`'-'` string, user 0 first.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        let n = s.chars().count();
        let mut ty = Self::all_dislike(n);
        for (u, c) in s.chars().enumerate() {
            match c {
                '+' => ty.set(u, true),
                '-' => {}
                other => return Err(ItemSpaceError::Parse(format!("character {other:?} at position {u}"))),
            }
        }
        Ok(ty)
    }

    pub fn to_bitstring(&self) -> String {
        (0..self.n_users)
            .map(|u| if self.likes(u) { '+' } else { '-' })
            .collect()
    }

    #[inline]
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    #[inline]
    pub fn likes(&self, user: usize) -> bool {
        debug_assert!(user < self.n_users);
        (self.words[user >> 6] >> (user & 63)) & 1 == 1
    }

    #[inline]
    pub fn pref(&self, user: usize) -> Feedback {
        Feedback::from_like(self.likes(user))
    }

    pub fn set(&mut self, user: usize, like: bool) {
        assert!(user < self.n_users, "user {user} out of range for {} users", self.n_users);
        let bit = 1u64 << (user & 63);
        if like {
            self.words[user >> 6] |= bit;
        } else {
            self.words[user >> 6] &= !bit;
        }
    }

    pub fn like_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn like_fraction(&self) -> f64 {
        self.like_count() as f64 / self.n_users as f64
    }

    pub fn likers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_users).filter(move |&u| self.likes(u))
    }

    /// Number of users whose preferences differ between the two types.
    pub fn disagreements(&self, other: &ItemType) -> Result<usize> {
        if self.n_users != other.n_users {
            return Err(ItemSpaceError::DimensionMismatch {
                left: self.n_users,
                right: other.n_users,
            });
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }
}

impl fmt::Debug for ItemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.n_users <= 64 {
            write!(f, "ItemType({})", self.to_bitstring())
        } else {
            write!(f, "ItemType(n={}, likes={})", self.n_users, self.like_count())
        }
    }
}

/// Fraction of users that disagree on the two types.
pub fn gamma_distance(x: &ItemType, y: &ItemType) -> Result<f64> {
    Ok(x.disagreements(y)? as f64 / x.n_users() as f64)
}

const WEIGHT_TOL: f64 = 1e-12;

/// A probability measure with finite support.
#[derive(Clone, Debug)]
pub struct FiniteMixture {
    n_users: usize,
    types: Vec<Arc<ItemType>>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl FiniteMixture {
    pub fn new(n_users: usize, types: Vec<ItemType>, weights: Vec<f64>) -> Result<Self> {
        if types.is_empty() {
            return Err(ItemSpaceError::InvalidWeights("empty support".into()));
        }
        if types.len() != weights.len() {
            return Err(ItemSpaceError::InvalidWeights(format!(
                "{} types but {} weights",
                types.len(),
                weights.len()
            )));
        }
        for ty in &types {
            if ty.n_users() != n_users {
                return Err(ItemSpaceError::DimensionMismatch {
                    left: n_users,
                    right: ty.n_users(),
                });
            }
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(ItemSpaceError::InvalidWeights(format!("weight {w} is negative or not finite")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(ItemSpaceError::InvalidWeights(format!("weights sum to {total}, expected 1")));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(FiniteMixture {
            n_users,
            types: types.into_iter().map(Arc::new).collect(),
            weights,
            cumulative,
        })
    }

    pub fn uniform(n_users: usize, types: Vec<ItemType>) -> Result<Self> {
        let k = types.len().max(1);
        Self::new(n_users, types, vec![1.0 / k as f64; k])
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn types(&self) -> &[Arc<ItemType>] {
        &self.types
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        if idx < self.types.len() {
            return idx;
        }
        // u landed in the rounding gap above the last cumulative value
        self.weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// μ(B(x, r)) with the closed ball `γ ≤ r`.
    pub fn ball_mass(&self, center: &ItemType, radius: f64) -> Result<f64> {
        let n = self.n_users as f64;
        let mut mass = 0.0;
        for (ty, w) in self.types.iter().zip(&self.weights) {
            let dis = center.disagreements(ty)? as f64;
            // compare in disagreement units to avoid rounding at the boundary
            if dis <= radius * n + 1e-9 {
                mass += w;
            }
        }
        Ok(mass)
    }

    /// Distinct support points with positive mass, duplicates merged.
    pub fn support(&self) -> Vec<(Arc<ItemType>, f64)> {
        let mut out: Vec<(Arc<ItemType>, f64)> = Vec::new();
        for (ty, &w) in self.types.iter().zip(&self.weights) {
            if w <= 0.0 {
                continue;
            }
            match out.iter_mut().find(|(t, _)| **t == **ty) {
                Some((_, acc)) => *acc += w,
                None => out.push((Arc::clone(ty), w)),
            }
        }
        out
    }

    /// Like probability of each user for an item drawn from this measure.
    pub fn user_like_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_users];
        for (ty, &w) in self.types.iter().zip(&self.weights) {
            if w > 0.0 {
                for u in ty.likers() {
                    mass[u] += w;
                }
            }
        }
        mass
    }
}

/// Parameters of the hierarchical cluster generator.
///
/// Leaves of a balanced tree (`k = branching^depth`) become equal-weight
/// types. Users are split into contiguous blocks, one block per "home" leaf;
/// every user likes its home leaf plus `j - 1` further leaves, chosen with
/// probability proportional to `locality^(h - 1)` where `h` is the height of
/// the lowest common ancestor. `j` is the integer closest to `1.5·ν·k` with
/// `ν ≤ j/k ≤ 2ν`, so each user's like mass is exactly `j/k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub k: usize,
    pub n_users: usize,
    pub nu: f64,
    #[serde(default = "default_depth")]
    pub depth: u32,
    #[serde(default = "default_locality")]
    pub locality: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_depth() -> u32 {
    1
}

fn default_locality() -> f64 {
    0.25
}

impl ClusterSpec {
    pub fn new(k: usize, n_users: usize, nu: f64, depth: u32, seed: u64) -> Self {
        ClusterSpec {
            k,
            n_users,
            nu,
            depth,
            locality: default_locality(),
            seed,
        }
    }

    /// Number of leaves each user likes, if one exists.
    pub fn likes_per_user(&self) -> Option<usize> {
        let k = self.k as f64;
        let lo = (self.nu * k - 1e-9).ceil().max(1.0) as usize;
        let hi = (2.0 * self.nu * k + 1e-9).floor() as usize;
        let target = 1.5 * self.nu * k;
        (lo..=hi).min_by(|a, b| {
            let da = (*a as f64 - target).abs();
            let db = (*b as f64 - target).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(b))
        })
    }

    fn branching(&self) -> Result<usize> {
        if self.depth <= 1 {
            return Ok(self.k);
        }
        let b = (self.k as f64).powf(1.0 / self.depth as f64).round() as usize;
        if b >= 2 && b.checked_pow(self.depth) == Some(self.k) {
            Ok(b)
        } else {
            Err(ItemSpaceError::Infeasible(format!(
                "k = {} is not a perfect power of depth {}",
                self.k, self.depth
            )))
        }
    }

    pub fn expand(&self) -> Result<FiniteMixture> {
        check_nu(self.nu)?;
        if self.k == 0 {
            return Err(ItemSpaceError::Infeasible("k must be at least 1".into()));
        }
        if self.n_users < self.k {
            return Err(ItemSpaceError::Infeasible(format!(
                "n_users = {} is smaller than k = {}",
                self.n_users, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.locality) {
            return Err(ItemSpaceError::Parameter {
                name: "locality",
                value: self.locality,
                expected: "0 ≤ locality ≤ 1",
            });
        }
        if self.k == 1 {
            // degenerate: one type liked by a 1.5ν fraction of users
            let likers = ((1.5 * self.nu * self.n_users as f64).round() as usize).max(1);
            let ty = ItemType::from_likes(self.n_users, 0..likers);
            return FiniteMixture::new(self.n_users, vec![ty], vec![1.0]);
        }
        let branching = self.branching()?;
        let j = self.likes_per_user().ok_or_else(|| {
            ItemSpaceError::Infeasible(format!(
                "no integer j with ν ≤ j/k ≤ 2ν for k = {}, ν = {} (each user's like mass is j/k)",
                self.k, self.nu
            ))
        })?;

        let n = self.n_users;
        let k = self.k;
        let home = |u: usize| u * k / n;
        let mut home_count = vec![0usize; k];
        for u in 0..n {
            home_count[home(u)] += 1;
        }
        let mut capacity: Vec<usize> = home_count.iter().map(|c| c * (j - 1)).collect();
        let mut likes: Vec<Vec<usize>> = (0..k).map(|_| Vec::new()).collect();
        for u in 0..n {
            likes[home(u)].push(u);
        }

        let lca_height = |a: usize, b: usize| -> u32 {
            let mut h = 1;
            let (mut x, mut y) = (a / branching, b / branching);
            while x != y {
                x /= branching;
                y /= branching;
                h += 1;
            }
            h
        };

        let mut rng = derive_rng(self.seed, stream::MEASURE);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut weights = vec![0.0f64; k];
        for &u in &order {
            let h = home(u);
            let mut chosen = vec![h];
            for _ in 1..j {
                let mut total = 0.0;
                for (leaf, w) in weights.iter_mut().enumerate() {
                    *w = if chosen.contains(&leaf) || capacity[leaf] == 0 {
                        0.0
                    } else {
                        self.locality.powi(lca_height(h, leaf) as i32 - 1) * capacity[leaf] as f64
                    };
                    total += *w;
                }
                if total <= 0.0 {
                    // capacities exhausted near this user; fall back to locality alone
                    for (leaf, w) in weights.iter_mut().enumerate() {
                        *w = if chosen.contains(&leaf) {
                            0.0
                        } else {
                            self.locality.powi(lca_height(h, leaf) as i32 - 1).max(f64::MIN_POSITIVE)
                        };
                        total += *w;
                    }
                }
                let mut x = rng.gen::<f64>() * total;
                let mut pick = k - 1;
                for (leaf, &w) in weights.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    if x < w {
                        pick = leaf;
                        break;
                    }
                    x -= w;
                    pick = leaf;
                }
                chosen.push(pick);
                capacity[pick] = capacity[pick].saturating_sub(1);
                likes[pick].push(u);
            }
        }

        let types: Vec<ItemType> = likes
            .into_iter()
            .map(|users| ItemType::from_likes(n, users))
            .collect();
        let mut violations = Vec::new();
        for (leaf, ty) in types.iter().enumerate() {
            let f = ty.like_fraction();
            if f < self.nu - WEIGHT_TOL || f > 2.0 * self.nu + WEIGHT_TOL {
                violations.push(format!("type {leaf} liked by fraction {f:.4} ∉ [{}, {}]", self.nu, 2.0 * self.nu));
            }
        }
        if !violations.is_empty() {
            return Err(ItemSpaceError::Infeasible(violations.join("; ")));
        }
        FiniteMixture::uniform(n, types)
    }
}

/// K user clusters with identical preferences inside each cluster.
///
/// Items come in `genres` equal-weight types; cluster `c` likes genre
/// `c mod genres` only, so every user's like mass is `1/genres`. The item-side
/// like fraction is whatever the cluster sizes make it and is not enforced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserClusterSpec {
    pub k_clusters: usize,
    pub n_users: usize,
    pub nu: f64,
    #[serde(default)]
    pub genres: Option<usize>,
}

impl UserClusterSpec {
    pub fn genre_count(&self) -> usize {
        self.genres
            .unwrap_or_else(|| (1.0 / (1.5 * self.nu)).round().max(1.0) as usize)
    }

    pub fn cluster_of(&self, user: usize) -> usize {
        user * self.k_clusters / self.n_users
    }

    pub fn expand(&self) -> Result<FiniteMixture> {
        check_nu(self.nu)?;
        if self.k_clusters == 0 || self.n_users < self.k_clusters {
            return Err(ItemSpaceError::Infeasible(format!(
                "need 1 ≤ k_clusters ≤ n_users, got k_clusters = {}, n_users = {}",
                self.k_clusters, self.n_users
            )));
        }
        let g = self.genre_count();
        let mass = 1.0 / g as f64;
        if mass < self.nu - WEIGHT_TOL || mass > 2.0 * self.nu + WEIGHT_TOL {
            return Err(ItemSpaceError::Infeasible(format!(
                "user like mass 1/{g} = {mass:.4} ∉ [{}, {}]",
                self.nu,
                2.0 * self.nu
            )));
        }
        let types = (0..g)
            .map(|genre| ItemType::from_fn(self.n_users, |u| self.cluster_of(u) % g == genre))
            .collect();
        FiniteMixture::uniform(self.n_users, types)
    }
}

fn check_nu(nu: f64) -> Result<()> {
    if nu > 0.0 && nu < 0.25 {
        Ok(())
    } else {
        Err(ItemSpaceError::Parameter {
            name: "nu",
            value: nu,
            expected: "0 < ν < 1/4",
        })
    }
}

/// A sampleable probability measure over item types.
#[derive(Clone, Debug)]
pub enum ItemMeasure {
    FiniteMixture(FiniteMixture),
    UniformCube { n_users: usize },
    HierarchicalClusters { spec: ClusterSpec, mixture: FiniteMixture },
    UserClusters { spec: UserClusterSpec, mixture: FiniteMixture },
}

impl ItemMeasure {
    pub fn n_users(&self) -> usize {
        match self {
            ItemMeasure::UniformCube { n_users } => *n_users,
            _ => self.as_finite().map(FiniteMixture::n_users).unwrap_or(0),
        }
    }

    pub fn as_finite(&self) -> Option<&FiniteMixture> {
        match self {
            ItemMeasure::FiniteMixture(m) => Some(m),
            ItemMeasure::HierarchicalClusters { mixture, .. } => Some(mixture),
            ItemMeasure::UserClusters { mixture, .. } => Some(mixture),
            ItemMeasure::UniformCube { .. } => None,
        }
    }

    pub fn sample_item<R: Rng + ?Sized>(&self, rng: &mut R) -> Arc<ItemType> {
        match self {
            ItemMeasure::UniformCube { n_users } => {
                let n = *n_users;
                let mut ty = ItemType::all_dislike(n);
                for (w, word) in ty.words.iter_mut().enumerate() {
                    let mut bits: u64 = rng.gen();
                    let valid = n - w * 64;
                    if valid < 64 {
                        bits &= (1u64 << valid) - 1;
                    }
                    *word = bits;
                }
                Arc::new(ty)
            }
            _ => {
                let m = self.as_finite().expect("finite measure");
                Arc::clone(&m.types[m.sample_index(rng)])
            }
        }
    }

    pub fn to_spec(&self) -> MeasureSpec {
        match self {
            ItemMeasure::FiniteMixture(m) => MeasureSpec::FiniteMixture {
                n_users: m.n_users,
                types: m.types.iter().map(|t| t.to_bitstring()).collect(),
                weights: m.weights.clone(),
            },
            ItemMeasure::UniformCube { n_users } => MeasureSpec::UniformCube { n_users: *n_users },
            ItemMeasure::HierarchicalClusters { spec, .. } => MeasureSpec::HierarchicalClusters(spec.clone()),
            ItemMeasure::UserClusters { spec, .. } => MeasureSpec::UserClusters(spec.clone()),
        }
    }

    pub fn from_spec(spec: &MeasureSpec) -> Result<Self> {
        Ok(match spec {
            MeasureSpec::FiniteMixture { n_users, types, weights } => {
                let types = types
                    .iter()
                    .map(|s| ItemType::from_bitstring(s))
                    .collect::<Result<Vec<_>>>()?;
                ItemMeasure::FiniteMixture(FiniteMixture::new(*n_users, types, weights.clone())?)
            }
            MeasureSpec::UniformCube { n_users } => {
                if *n_users == 0 {
                    return Err(ItemSpaceError::Infeasible("n_users must be positive".into()));
                }
                ItemMeasure::UniformCube { n_users: *n_users }
            }
            MeasureSpec::HierarchicalClusters(spec) => ItemMeasure::HierarchicalClusters {
                mixture: spec.expand()?,
                spec: spec.clone(),
            },
            MeasureSpec::UserClusters(spec) => ItemMeasure::UserClusters {
                mixture: spec.expand()?,
                spec: spec.clone(),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_spec())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: MeasureSpec = serde_json::from_str(s)?;
        Self::from_spec(&spec)
    }

    /// Expanded finite mixture as a self-contained measure (generator params dropped).
    pub fn materialized(&self) -> Self {
        match self.as_finite() {
            Some(m) => ItemMeasure::FiniteMixture(m.clone()),
            None => self.clone(),
        }
    }
}

/// Serializable description of an [`ItemMeasure`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum MeasureSpec {
    FiniteMixture {
        n_users: usize,
        types: Vec<String>,
        weights: Vec<f64>,
    },
    UniformCube {
        n_users: usize,
    },
    HierarchicalClusters(ClusterSpec),
    UserClusters(UserClusterSpec),
}

pub fn sample_item<R: Rng + ?Sized>(measure: &ItemMeasure, rng: &mut R) -> Arc<ItemType> {
    measure.sample_item(rng)
}

/// Doubling dimension of a finite-support measure.
///
/// Ball masses around a support point are step functions of the radius that
/// only change at support distances, so the supremum over `r` is attained at
/// one of `r = γ(x,y)/2` or `r = γ(x,y)`. Radii are handled in half-units of
/// `1/N` so the comparisons are exact.
pub fn doubling_dimension_exact(measure: &ItemMeasure) -> Result<f64> {
    let mixture = measure
        .as_finite()
        .ok_or(ItemSpaceError::UnsupportedMeasure("doubling dimension needs finite support"))?;
    Ok(doubling_dimension_of(mixture))
}

pub fn doubling_dimension_of(mixture: &FiniteMixture) -> f64 {
    let support = mixture.support();
    let mut best = 0.0f64;
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(support.len());
    for (x, _) in &support {
        row.clear();
        for (y, w) in &support {
            let dis = x.disagreements(y).expect("support types share a dimension");
            row.push((dis, *w));
        }
        row.sort_unstable_by_key(|&(d, _)| d);
        let mut prefix = Vec::with_capacity(row.len());
        let mut acc = 0.0;
        for &(_, w) in &row {
            acc += w;
            prefix.push(acc);
        }
        // mass of {y : dis(x,y) ≤ limit}
        let mass_le = |limit: usize| -> f64 {
            let idx = row.partition_point(|&(d, _)| d <= limit);
            if idx == 0 {
                0.0
            } else {
                prefix[idx - 1]
            }
        };
        for &(dis, _) in &row {
            if dis == 0 {
                continue;
            }
            // radius in half-units: R = dis (r = γ/2) and R = 2·dis (r = γ)
            for big_r in [dis, 2 * dis] {
                let outer = mass_le(big_r);
                let inner = mass_le(big_r / 2);
                if inner > 0.0 {
                    best = best.max((outer / inner).log2());
                }
            }
        }
    }
    best
}

/// Like fractions per user and per item, plus the exact doubling dimension when computable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub nu: f64,
    pub per_user_like_prob: Vec<f64>,
    pub per_item_like_frac: Vec<f64>,
    pub a2_user_ok: bool,
    pub a2_item_ok: bool,
    pub d_exact: Option<f64>,
    /// Present when the per-user probabilities are Monte-Carlo estimates.
    pub monte_carlo: Option<MonteCarloInfo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloInfo {
    pub samples: usize,
    /// Largest binomial standard error among the per-user estimates.
    pub max_stderr: f64,
}

impl AssumptionReport {
    pub fn a2_ok(&self) -> bool {
        self.a2_user_ok && self.a2_item_ok
    }
}

/// Support size above which the exact oracle is skipped.
pub const EXACT_DD_MAX_SUPPORT: usize = 4096;

/// Checks the like fractions exactly for finite support and by Monte Carlo otherwise.
///
/// The per-user bound is checked on the μ-expectation; the per-item bound on
/// the realized like fraction of every support type.
pub fn validate_assumptions(
    measure: &ItemMeasure,
    nu: f64,
    sample_budget: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    check_nu(nu)?;
    let within = |x: f64| x >= nu - WEIGHT_TOL && x <= 2.0 * nu + WEIGHT_TOL;
    match measure.as_finite() {
        Some(mixture) => {
            let per_user = mixture.user_like_mass();
            let per_item: Vec<f64> = mixture
                .types()
                .iter()
                .zip(mixture.weights())
                .filter(|(_, &w)| w > 0.0)
                .map(|(t, _)| t.like_fraction())
                .collect();
            let d_exact = (mixture.len() <= EXACT_DD_MAX_SUPPORT).then(|| doubling_dimension_of(mixture));
            Ok(AssumptionReport {
                nu,
                a2_user_ok: per_user.iter().all(|&p| within(p)),
                a2_item_ok: per_item.iter().all(|&f| within(f)),
                per_user_like_prob: per_user,
                per_item_like_frac: per_item,
                d_exact,
                monte_carlo: None,
            })
        }
        None => {
            let budget = sample_budget.max(1);
            let n = measure.n_users();
            let mut rng: SimRng = derive_rng(seed, stream::MEASURE);
            let mut counts = vec![0usize; n];
            let mut per_item = Vec::with_capacity(budget);
            for _ in 0..budget {
                let ty = measure.sample_item(&mut rng);
                for u in ty.likers() {
                    counts[u] += 1;
                }
                per_item.push(ty.like_fraction());
            }
            let per_user: Vec<f64> = counts.iter().map(|&c| c as f64 / budget as f64).collect();
            let max_stderr = per_user
                .iter()
                .map(|&p| (p * (1.0 - p) / budget as f64).sqrt())
                .fold(0.0, f64::max);
            Ok(AssumptionReport {
                nu,
                a2_user_ok: per_user.iter().all(|&p| within(p)),
                a2_item_ok: per_item.iter().all(|&f| within(f)),
                per_user_like_prob: per_user,
                per_item_like_frac: per_item,
                d_exact: None,
                monte_carlo: Some(MonteCarloInfo {
                    samples: budget,
                    max_stderr,
                }),
            })
        }
    }
}

/// Builds a hierarchical cluster measure and reports its assumptions.
pub fn make_cluster_measure(
    k: usize,
    n_users: usize,
    nu: f64,
    depth: u32,
    seed: u64,
) -> Result<(ItemMeasure, AssumptionReport)> {
    let spec = ClusterSpec::new(k, n_users, nu, depth, seed);
    let mixture = spec.expand()?;
    let measure = ItemMeasure::HierarchicalClusters { spec, mixture };
    let report = validate_assumptions(&measure, nu, 0, seed)?;
    Ok((measure, report))
}
