//! Per-item doubling dimension estimates from a ratings corpus.
//!
//! Ratings are binarized, pairwise disagreement fractions over co-raters are
//! corrected for a symmetric flip noise `Δ`, and each item's ball-count
//! profile gives `d_i = max_r log₂(N_{i,2r} / N_{i,r})`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_rng, stream};

#[derive(Debug, Error)]
pub enum DdError {
    #[error("malformed rows: {}", fmt_lines(.0))]
    Malformed(Vec<(u64, String)>),
    #[error("corpus has no ratings")]
    Empty,
    #[error("noise probability {0} makes the distance correction ill-posed (need 0 ≤ Δ < 0.5)")]
    IllPosed(f64),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_lines(rows: &[(u64, String)]) -> String {
    let shown: Vec<String> = rows.iter().take(20).map(|(l, m)| format!("line {l}: {m}")).collect();
    let more = if rows.len() > 20 {
        format!(" (and {} more)", rows.len() - 20)
    } else {
        String::new()
    };
    format!("{}{more}", shown.join("; "))
}

pub type Result<T, E = DdError> = std::result::Result<T, E>;

/// How raw ratings become likes.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    /// `rating > x` is a like.
    Above(f64),
    /// `rating ≥ x` is a like.
    AtLeast(f64),
}

impl Binarize {
    /// Jester: ratings above 2 are likes.
    pub const JESTER: Binarize = Binarize::Above(2.0);
    /// MovieLens: 4 stars or more are likes.
    pub const MOVIELENS: Binarize = Binarize::AtLeast(4.0);

    pub fn likes(self, rating: f64) -> bool {
        match self {
            Binarize::Above(x) => rating > x,
            Binarize::AtLeast(x) => rating >= x,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "jester" => Some(Self::JESTER),
            "movielens" => Some(Self::MOVIELENS),
            _ => None,
        }
    }
}

/// Binarized ratings, one column of bitsets per item.
#[derive(Clone, Debug)]
pub struct RatingsCorpus {
    users: Vec<String>,
    items: Vec<String>,
    words: usize,
    rated: Vec<Vec<u64>>,
    liked: Vec<Vec<u64>>,
    n_ratings: u64,
}

impl RatingsCorpus {
    /// Reads `user_id,item_id,rating` rows. All bad rows are reported together.
    pub fn from_csv<R: Read>(input: R, rule: Binarize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names != ["user_id", "item_id", "rating"] {
            return Err(DdError::Malformed(vec![(
                1,
                format!("expected header user_id,item_id,rating, found {}", names.join(",")),
            )]));
        }
        let mut bad = Vec::new();
        let mut triples = Vec::new();
        let mut seen = FxHashMap::default();
        for row in rdr.records() {
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    bad.push((line, e.to_string()));
                    continue;
                }
            };
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != 3 {
                bad.push((line, format!("expected 3 fields, found {}", row.len())));
                continue;
            }
            let rating: f64 = match row[2].parse() {
                Ok(v) if f64::is_finite(v) => v,
                _ => {
                    bad.push((line, format!("rating {:?} is not a number", &row[2])));
                    continue;
                }
            };
            if row[0].is_empty() || row[1].is_empty() {
                bad.push((line, "empty id".into()));
                continue;
            }
            let key = (row[0].to_string(), row[1].to_string());
            if let Some(first) = seen.insert(key.clone(), line) {
                bad.push((line, format!("user {} already rated item {} on line {first}", key.0, key.1)));
                continue;
            }
            triples.push((key.0, key.1, rule.likes(rating)));
        }
        if !bad.is_empty() {
            return Err(DdError::Malformed(bad));
        }
        Self::from_triples(triples)
    }

    /// Builds a corpus from already binarized `(user, item, like)` triples.
    pub fn from_triples<U: ToString, I: ToString>(triples: impl IntoIterator<Item = (U, I, bool)>) -> Result<Self> {
        let mut user_idx: FxHashMap<String, usize> = FxHashMap::default();
        let mut item_idx: FxHashMap<String, usize> = FxHashMap::default();
        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut cells = Vec::new();
        for (u, i, like) in triples {
            let u = u.to_string();
            let i = i.to_string();
            let ui = *user_idx.entry(u.clone()).or_insert_with(|| {
                users.push(u);
                users.len() - 1
            });
            let ii = *item_idx.entry(i.clone()).or_insert_with(|| {
                items.push(i);
                items.len() - 1
            });
            cells.push((ui, ii, like));
        }
        if cells.is_empty() {
            return Err(DdError::Empty);
        }
        let words = users.len().div_ceil(64);
        let mut rated = vec![vec![0u64; words]; items.len()];
        let mut liked = vec![vec![0u64; words]; items.len()];
        for &(u, i, like) in &cells {
            let bit = 1u64 << (u % 64);
            if rated[i][u / 64] & bit != 0 {
                return Err(DdError::Argument(format!("duplicate rating of item {} by user {}", items[i], users[u])));
            }
            rated[i][u / 64] |= bit;
            if like {
                liked[i][u / 64] |= bit;
            }
        }
        Ok(RatingsCorpus {
            users,
            items,
            words,
            rated,
            liked,
            n_ratings: cells.len() as u64,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_ratings(&self) -> u64 {
        self.n_ratings
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.items[i]
    }

    /// Binarized rating as ±1, if present.
    pub fn rating(&self, user: usize, item: usize) -> Option<i8> {
        let bit = 1u64 << (user % 64);
        if self.rated[item][user / 64] & bit == 0 {
            None
        } else if self.liked[item][user / 64] & bit != 0 {
            Some(1)
        } else {
            Some(-1)
        }
    }

    /// `(co-raters, disagreements)` for two items.
    pub fn co_ratings(&self, i: usize, j: usize) -> (u32, u32) {
        let (ri, rj, li, lj) = (&self.rated[i], &self.rated[j], &self.liked[i], &self.liked[j]);
        let mut co = 0;
        let mut dis = 0;
        for w in 0..self.words {
            let both = ri[w] & rj[w];
            co += both.count_ones();
            dis += ((li[w] ^ lj[w]) & both).count_ones();
        }
        (co, dis)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "item_id", "rating"])?;
        for (u, user) in self.users.iter().enumerate() {
            for (i, item) in self.items.iter().enumerate() {
                if let Some(r) = self.rating(u, i) {
                    w.write_record([user.as_str(), item.as_str(), if r > 0 { "1" } else { "-1" }])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Disagreement fraction among users who rated both items, or `None` when
/// fewer than `min_corating` users did.
pub fn noisy_distance(corpus: &RatingsCorpus, i: usize, j: usize, min_corating: u32) -> Option<f64> {
    let (co, dis) = corpus.co_ratings(i, j);
    if co == 0 || co < min_corating {
        None
    } else {
        Some(dis as f64 / co as f64)
    }
}

/// Inverts `d̂ = (1 − d)·2Δ(1 − Δ) + d·(Δ² + (1 − Δ)²)`.
///
/// Returns the estimate clamped to `[0, 1]` and whether clamping happened.
pub fn denoise_distance(dhat: f64, delta: f64) -> Result<(f64, bool)> {
    if !(0.0..0.5).contains(&delta) {
        return Err(DdError::IllPosed(delta));
    }
    let d = (dhat - 2.0 * delta * (1.0 - delta)) / ((1.0 - 2.0 * delta) * (1.0 - 2.0 * delta));
    // rounding right at the boundary is not a clamp
    const SLACK: f64 = 1e-12;
    if d < 0.0 {
        Ok((0.0, d < -SLACK))
    } else if d > 1.0 {
        Ok((1.0, d > 1.0 + SLACK))
    } else {
        Ok((d, false))
    }
}

/// Uniform radius grid `{0, 1/(points−1), …, 1}`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiusGrid {
    pub points: usize,
}

impl RadiusGrid {
    pub fn uniform(points: usize) -> Self {
        assert!(points >= 2, "radius grid needs at least two points");
        RadiusGrid { points }
    }

    /// The finest grid a corpus with `n_users` raters can resolve.
    pub fn per_user(n_users: usize) -> Self {
        Self::uniform(n_users.max(1) + 1)
    }

    pub fn step(&self) -> f64 {
        1.0 / (self.points - 1) as f64
    }

    pub fn radius(&self, k: usize) -> f64 {
        k as f64 * self.step()
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.points).map(|k| self.radius(k)).collect()
    }
}

/// `N_{i,r}` at every grid radius: the item itself plus every retained
/// neighbor within distance `r`.
pub fn ball_counts(distances: &[f64], grid: RadiusGrid) -> Vec<usize> {
    let mut sorted: Vec<f64> = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    // tolerance absorbs float noise in k/(points−1)
    (0..grid.points)
        .map(|k| 1 + sorted.partition_point(|&d| d <= grid.radius(k) + 1e-12))
        .collect()
}

/// `max_{0 < r ≤ ½} log₂(N_{i,2r}/N_{i,r})` over grid radii whose double is
/// also on the grid.
pub fn item_dd(counts: &[usize]) -> f64 {
    let last = counts.len() - 1;
    let mut best = 0.0f64;
    for k in 1..=last / 2 {
        let ratio = counts[2 * k] as f64 / counts[k].max(1) as f64;
        best = best.max(ratio.log2());
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdOptions {
    pub delta: f64,
    pub min_corating: u32,
    pub grid: RadiusGrid,
    pub bin_width: f64,
}

impl Default for DdOptions {
    fn default() -> Self {
        DdOptions {
            delta: 0.0,
            min_corating: 20,
            grid: RadiusGrid::uniform(101),
            bin_width: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemDd {
    pub item_id: String,
    pub d_i: f64,
    pub n_neighbors: usize,
    pub clamp_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdHistogram {
    pub bin_width: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Center of the fullest bin.
    pub mode: f64,
    pub min_corating: u32,
}

impl DdHistogram {
    pub fn new(values: &[f64], bin_width: f64, min_corating: u32) -> Self {
        assert!(bin_width > 0.0);
        let top = values.iter().copied().fold(0.0, f64::max);
        let bins = ((top / bin_width).floor() as usize + 1).max(1);
        let mut counts = vec![0; bins];
        for &v in values {
            counts[((v / bin_width + 1e-9).floor() as usize).min(bins - 1)] += 1;
        }
        let edges = (0..=bins).map(|k| k as f64 * bin_width).collect();
        // first fullest bin wins ties
        let mode_bin = counts
            .iter()
            .enumerate()
            .fold((0, 0), |(bk, bc), (k, &c)| if c > bc { (k, c) } else { (bk, bc) })
            .0;
        DdHistogram {
            bin_width,
            edges,
            counts,
            mode: (mode_bin as f64 + 0.5) * bin_width,
            min_corating,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdReport {
    pub delta: f64,
    pub grid_points: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub pairs_retained: u64,
    pub pairs_skipped: u64,
    pub clamp_rate: f64,
    pub items: Vec<ItemDd>,
    pub histogram: DdHistogram,
}

impl DdReport {
    pub const CSV_HEADER: [&'static str; 4] = ["item_id", "d_i", "n_neighbors", "clamp_rate"];

    pub fn write_items_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for it in &self.items {
            w.write_record([
                it.item_id.clone(),
                it.d_i.to_string(),
                it.n_neighbors.to_string(),
                it.clamp_rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Histogram plus corpus-level counts, without the per-item rows.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            delta: f64,
            grid_points: usize,
            n_users: usize,
            n_items: usize,
            pairs_retained: u64,
            pairs_skipped: u64,
            clamp_rate: f64,
            histogram: &'a DdHistogram,
        }
        Ok(serde_json::to_string_pretty(&Summary {
            delta: self.delta,
            grid_points: self.grid_points,
            n_users: self.n_users,
            n_items: self.n_items,
            pairs_retained: self.pairs_retained,
            pairs_skipped: self.pairs_skipped,
            clamp_rate: self.clamp_rate,
            histogram: &self.histogram,
        })?)
    }
}

/// Runs the whole estimate. Pairs below the co-rating minimum are left out.
pub fn estimate(corpus: &RatingsCorpus, opts: &DdOptions) -> Result<DdReport> {
    denoise_distance(0.0, opts.delta)?;
    if !(opts.bin_width > 0.0) {
        return Err(DdError::Argument("bin width must be positive".into()));
    }
    let m = corpus.n_items();
    struct Row {
        dists: Vec<f64>,
        clamped: usize,
        skipped: usize,
    }
    let rows: Vec<Row> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut row = Row {
                dists: Vec::new(),
                clamped: 0,
                skipped: 0,
            };
            for j in 0..m {
                if j == i {
                    continue;
                }
                match noisy_distance(corpus, i, j, opts.min_corating) {
                    Some(dhat) => {
                        let (d, c) = denoise_distance(dhat, opts.delta).expect("delta checked");
                        row.dists.push(d);
                        row.clamped += c as usize;
                    }
                    None => row.skipped += 1,
                }
            }
            row
        })
        .collect();
    let items: Vec<ItemDd> = rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| ItemDd {
            item_id: corpus.item_id(i).to_string(),
            d_i: item_dd(&ball_counts(&row.dists, opts.grid)),
            n_neighbors: row.dists.len(),
            clamp_rate: if row.dists.is_empty() {
                0.0
            } else {
                row.clamped as f64 / row.dists.len() as f64
            },
        })
        .collect();
    // each unordered pair was seen from both ends
    let retained: u64 = rows.iter().map(|r| r.dists.len() as u64).sum::<u64>() / 2;
    let skipped: u64 = rows.iter().map(|r| r.skipped as u64).sum::<u64>() / 2;
    let clamped: u64 = rows.iter().map(|r| r.clamped as u64).sum::<u64>() / 2;
    let values: Vec<f64> = items.iter().map(|it| it.d_i).collect();
    Ok(DdReport {
        delta: opts.delta,
        grid_points: opts.grid.points,
        n_users: corpus.n_users(),
        n_items: m,
        pairs_retained: retained,
        pairs_skipped: skipped,
        clamp_rate: if retained == 0 { 0.0 } else { clamped as f64 / retained as f64 },
        histogram: DdHistogram::new(&values, opts.bin_width, opts.min_corating),
        items,
    })
}

/// Parameters of a planted-cluster corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedCorpus {
    pub k: usize,
    pub n_items: usize,
    pub n_users: usize,
    /// Each rating is flipped independently with this probability.
    pub flip: f64,
    /// Each (user, item) rating is present with this probability.
    pub observe: f64,
    pub seed: u64,
}

impl PlantedCorpus {
    pub fn new(k: usize, n_items: usize, n_users: usize, flip: f64, seed: u64) -> Self {
        PlantedCorpus {
            k,
            n_items,
            n_users,
            flip,
            observe: 1.0,
            seed,
        }
    }

    /// `K` random cluster types; items are dealt round-robin so cluster sizes
    /// differ by at most one.
    pub fn generate(&self) -> Result<RatingsCorpus> {
        if self.k == 0 || self.n_items == 0 || self.n_users == 0 {
            return Err(DdError::Argument("k, items and users must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip) || !(0.0..=1.0).contains(&self.observe) {
            return Err(DdError::Argument("flip and observe must be probabilities".into()));
        }
        let mut rng = derive_rng(self.seed, stream::ITEMS);
        let centers: Vec<Vec<bool>> = (0..self.k)
            .map(|_| (0..self.n_users).map(|_| rng.gen_bool(0.5)).collect())
            .collect();
        let mut triples = Vec::with_capacity(self.n_items * self.n_users);
        for i in 0..self.n_items {
            let center = &centers[i % self.k];
            for (u, &like) in center.iter().enumerate() {
                if self.observe < 1.0 && !rng.gen_bool(self.observe) {
                    continue;
                }
                let flipped = rng.gen_bool(self.flip);
                triples.push((u, i, like ^ flipped));
            }
        }
        RatingsCorpus::from_triples(triples)
    }

    /// Ground-truth cluster of each item, keyed by item id.
    pub fn clusters(&self) -> BTreeMap<String, usize> {
        (0..self.n_items).map(|i| (i.to_string(), i % self.k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_of(columns: &[&[i8]]) -> RatingsCorpus {
        let mut t = Vec::new();
        for (i, col) in columns.iter().enumerate() {
            for (u, &r) in col.iter().enumerate() {
                if r != 0 {
                    t.push((u, i, r > 0));
                }
            }
        }
        RatingsCorpus::from_triples(t).unwrap()
    }

    #[test]
    fn noisy_distance_examples() {
        let a: Vec<i8> = vec![1, -1, 1, 1, -1, 1, -1, -1, 1, 1];
        let opp: Vec<i8> = a.iter().map(|x| -x).collect();
        let mut three = a.clone();
        for u in [0, 4, 7] {
            three[u] = -three[u];
        }
        let c = corpus_of(&[&a, &a, &opp, &three]);
        assert_eq!(noisy_distance(&c, 0, 1, 1), Some(0.0));
        assert_eq!(noisy_distance(&c, 0, 2, 1), Some(1.0));
        assert_eq!(noisy_distance(&c, 0, 3, 1), Some(0.3));
        assert_eq!(noisy_distance(&c, 0, 3, 11), None);
    }

    #[test]
    fn co_ratings_only_count_shared_users() {
        let c = corpus_of(&[&[1, 1, 0, -1], &[-1, 0, 1, -1]]);
        assert_eq!(c.co_ratings(0, 1), (2, 1));
    }

    #[test]
    fn denoise_examples() {
        let (d, c) = denoise_distance(0.32, 0.2).unwrap();
        assert!(d.abs() < 1e-12 && !c);
        let (d, _) = denoise_distance(0.68, 0.2).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(denoise_distance(0.37, 0.0).unwrap(), (0.37, false));
        assert!(matches!(denoise_distance(0.3, 0.5), Err(DdError::IllPosed(_))));
        assert_eq!(denoise_distance(0.1, 0.2).unwrap(), (0.0, true));
    }

    #[test]
    fn ball_count_examples() {
        let g = RadiusGrid::uniform(11);
        assert_eq!(ball_counts(&[], g), vec![1; 11]);
        let c = ball_counts(&[0.3], g);
        assert_eq!(c[2], 1);
        assert_eq!(c[3], 2);
        assert_eq!(ball_counts(&[0.0, 0.0, 0.0], g)[0], 4);
    }

    #[test]
    fn item_dd_examples() {
        assert_eq!(item_dd(&[1; 101]), 0.0);
        // N_r ∝ r^c on the grid
        let g = RadiusGrid::uniform(65);
        for c in [1u32, 2, 3] {
            let counts: Vec<usize> = (0..g.points).map(|k| k.max(1).pow(c)).collect();
            assert!((item_dd(&counts) - c as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_parse_reports_all_bad_lines() {
        let text = "user_id,item_id,rating\nu1,i1,5\nu1,i2,x\nu2,i1,3\nu1,i1,4\n";
        match RatingsCorpus::from_csv(text.as_bytes(), Binarize::MOVIELENS) {
            Err(DdError::Malformed(rows)) => {
                let lines: Vec<u64> = rows.iter().map(|r| r.0).collect();
                assert_eq!(lines, vec![3, 5]);
            }
            other => panic!("{other:?}"),
        }
        let ok = RatingsCorpus::from_csv("user_id,item_id,rating\nu1,i1,5\nu2,i1,3\n".as_bytes(), Binarize::MOVIELENS)
            .unwrap();
        assert_eq!(ok.rating(0, 0), Some(1));
        assert_eq!(ok.rating(1, 0), Some(-1));
        assert!(matches!(
            RatingsCorpus::from_csv("user_id,item_id,rating\n".as_bytes(), Binarize::JESTER),
            Err(DdError::Empty)
        ));
    }

    #[test]
    fn binarize_rules() {
        assert!(!Binarize::JESTER.likes(2.0) && Binarize::JESTER.likes(2.5));
        assert!(Binarize::MOVIELENS.likes(4.0) && !Binarize::MOVIELENS.likes(3.5));
    }

    #[test]
    fn single_item_corpus_has_zero_dimension() {
        let c = corpus_of(&[&[1, -1, 1]]);
        let r = estimate(&c, &DdOptions::default()).unwrap();
        assert_eq!(r.items[0].d_i, 0.0);
    }

    #[test]
    fn planted_four_clusters_noiseless() {
        let c = PlantedCorpus::new(4, 100, 300, 0.0, 1).generate().unwrap();
        let r = estimate(&c, &DdOptions::default()).unwrap();
        assert!((r.histogram.mode - 2.0).abs() <= r.histogram.bin_width, "{:?}", r.histogram);
    }

    #[test]
    fn corpus_csv_round_trip() {
        let c = PlantedCorpus::new(2, 5, 7, 0.1, 3).generate().unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = RatingsCorpus::from_csv(buf.as_slice(), Binarize::Above(0.0)).unwrap();
        for u in 0..7 {
            for i in 0..5 {
                assert_eq!(c.rating(u, i), back.rating(u, i));
            }
        }
    }
}
