//! Interaction and social edge ingestion, the per-user train/test split,
//! negative sampling, and planted-noise synthetic datasets.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retry bound for drawing a non-interacted negative item.
pub const NEGATIVE_RETRIES: usize = 100;

/// Immutable user/item universe with a train/test split and an undirected
/// social graph.
///
/// Users are `0..user_count`, items `0..item_count`. Social edges are stored
/// once per unordered pair as `(a, b)` with `a < b`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    user_count: usize,
    item_count: usize,
    train: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
    train_by_user: Vec<Vec<usize>>,
    test_by_user: Vec<Vec<usize>>,
    social_edges: Vec<(usize, usize)>,
    user_labels: Vec<u64>,
    item_labels: Vec<u64>,
}

impl Dataset {
    /// Validates and indexes a dataset. Interaction lists may be in any order;
    /// social edges may be given in either orientation but must be unique.
    pub fn new(
        user_count: usize,
        item_count: usize,
        train: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
        social_edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let user_labels = (0..user_count as u64).collect();
        let item_labels = (0..item_count as u64).collect();
        Self::with_labels(
            user_count,
            item_count,
            train,
            test,
            social_edges,
            user_labels,
            item_labels,
        )
    }

    fn with_labels(
        user_count: usize,
        item_count: usize,
        mut train: Vec<(usize, usize)>,
        mut test: Vec<(usize, usize)>,
        social_edges: Vec<(usize, usize)>,
        user_labels: Vec<u64>,
        item_labels: Vec<u64>,
    ) -> Result<Self> {
        if user_count == 0 || item_count == 0 {
            return Err(Error::Data("dataset needs at least one user and one item".into()));
        }
        for &(u, i) in train.iter().chain(test.iter()) {
            if u >= user_count || i >= item_count {
                return Err(Error::Data(format!(
                    "interaction ({u}, {i}) outside {user_count} users x {item_count} items"
                )));
            }
        }
        train.sort_unstable();
        train.dedup();
        test.sort_unstable();
        test.dedup();
        let train_set: HashSet<_> = train.iter().copied().collect();
        if let Some(p) = test.iter().find(|p| train_set.contains(p)) {
            return Err(Error::Data(format!("interaction {p:?} is in both train and test")));
        }

        let mut social = Vec::with_capacity(social_edges.len());
        for (a, b) in social_edges {
            if a >= user_count || b >= user_count {
                return Err(Error::Data(format!("social edge ({a}, {b}) has an unknown user")));
            }
            if a == b {
                return Err(Error::Data(format!("social self-loop on user {a}")));
            }
            social.push((a.min(b), a.max(b)));
        }
        social.sort_unstable();
        let before = social.len();
        social.dedup();
        if social.len() != before {
            return Err(Error::Data("duplicate social edge".into()));
        }

        let mut train_by_user = vec![Vec::new(); user_count];
        for &(u, i) in &train {
            train_by_user[u].push(i);
        }
        let mut test_by_user = vec![Vec::new(); user_count];
        for &(u, i) in &test {
            test_by_user[u].push(i);
        }

        Ok(Self {
            user_count,
            item_count,
            train,
            test,
            train_by_user,
            test_by_user,
            social_edges: social,
            user_labels,
            item_labels,
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn node_count(&self) -> usize {
        self.user_count + self.item_count
    }

    /// Train interactions sorted by `(user, item)`.
    pub fn train(&self) -> &[(usize, usize)] {
        &self.train
    }

    pub fn test(&self) -> &[(usize, usize)] {
        &self.test
    }

    /// Sorted train items of `user`.
    pub fn train_items(&self, user: usize) -> &[usize] {
        &self.train_by_user[user]
    }

    pub fn test_items(&self, user: usize) -> &[usize] {
        &self.test_by_user[user]
    }

    pub fn is_train(&self, user: usize, item: usize) -> bool {
        self.train_by_user[user].binary_search(&item).is_ok()
    }

    /// Unordered social pairs `(a, b)`, `a < b`, sorted.
    pub fn social_edges(&self) -> &[(usize, usize)] {
        &self.social_edges
    }

    /// Position of the unordered pair `{a, b}` in [`Dataset::social_edges`].
    pub fn social_index(&self, a: usize, b: usize) -> Option<usize> {
        self.social_edges.binary_search(&(a.min(b), a.max(b))).ok()
    }

    /// Copy of this dataset with the social graph removed.
    pub fn without_social(&self) -> Self {
        Self {
            social_edges: Vec::new(),
            ..self.clone()
        }
    }

    /// Splits each user's train interactions again, holding out `fraction` of
    /// them as the new test set. The original test set is dropped.
    pub fn holdout(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction {fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, test) = split_per_user(&self.train_by_user, 1.0 - fraction, &mut rng);
        Self::with_labels(
            self.user_count,
            self.item_count,
            train,
            test,
            self.social_edges.clone(),
            self.user_labels.clone(),
            self.item_labels.clone(),
        )
    }

    /// Original id of a dense user index, as it appeared in the input file.
    pub fn user_label(&self, user: usize) -> u64 {
        self.user_labels[user]
    }

    pub fn item_label(&self, item: usize) -> u64 {
        self.item_labels[item]
    }

    /// Writes train ∪ test as `user<TAB>item` lines using original labels,
    /// sorted by dense `(user, item)`.
    pub fn write_interactions(&self, path: &Path) -> Result<()> {
        let mut all: Vec<_> = self.train.iter().chain(self.test.iter()).copied().collect();
        all.sort_unstable();
        let mut out = String::new();
        for (u, i) in all {
            let _ = writeln!(out, "{}\t{}", self.user_labels[u], self.item_labels[i]);
        }
        crate::io::atomic_write(path, out.as_bytes())
    }

    /// Writes each unordered social pair once as `a<TAB>b`.
    pub fn write_social(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &(a, b) in &self.social_edges {
            let _ = writeln!(out, "{}\t{}", self.user_labels[a], self.user_labels[b]);
        }
        crate::io::atomic_write(path, out.as_bytes())
    }
}

/// A `(user, positive, negative)` training triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draws `batch_size` triples: `(user, positive)` uniform over train
/// interactions, the negative uniform over items not in the user's train set.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainingTriple>> {
    let train = dataset.train();
    if train.is_empty() {
        return Err(Error::Data("no train interactions to sample from".into()));
    }
    let n_items = dataset.item_count();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (user, positive) = train[rng.random_range(0..train.len())];
        let mut negative = None;
        for _ in 0..NEGATIVE_RETRIES {
            let j = rng.random_range(0..n_items);
            if !dataset.is_train(user, j) {
                negative = Some(j);
                break;
            }
        }
        let negative = negative.ok_or_else(|| {
            Error::Data(format!(
                "no negative item found for user {user} after {NEGATIVE_RETRIES} draws"
            ))
        })?;
        out.push(TrainingTriple {
            user,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Reads the two id files, re-indexes ids densely in order of first
/// appearance (interactions first, then social), and splits per user.
pub fn load_dataset(
    interactions_path: &Path,
    social_path: &Path,
    split_ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    let interactions = read_pairs(interactions_path)?;
    if interactions.is_empty() {
        return Err(Error::Data(format!(
            "{}: no interactions",
            interactions_path.display()
        )));
    }
    let social = read_pairs(social_path)?;

    let mut users = Indexer::default();
    let mut items = Indexer::default();
    let mut per_user: Vec<Vec<usize>> = Vec::new();
    let mut seen = HashSet::new();
    for &(u, i) in &interactions {
        let u = users.index(u);
        let i = items.index(i);
        if per_user.len() <= u {
            per_user.resize_with(u + 1, Vec::new);
        }
        if seen.insert((u, i)) {
            per_user[u].push(i);
        }
    }
    let mut pairs = BTreeSet::new();
    for &(a, b) in &social {
        if a == b {
            continue;
        }
        let a = users.index(a);
        let b = users.index(b);
        pairs.insert((a.min(b), a.max(b)));
    }
    per_user.resize_with(users.len(), Vec::new);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split_per_user(&per_user, split_ratio, &mut rng);
    Dataset::with_labels(
        users.len(),
        items.len(),
        train,
        test,
        pairs.into_iter().collect(),
        users.labels,
        items.labels,
    )
}

/// Number of train interactions for a user with `n` interactions.
pub fn train_count(n: usize, ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (ratio * n as f64 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

fn split_per_user<R: Rng + ?Sized>(
    per_user: &[Vec<usize>],
    ratio: f64,
    rng: &mut R,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (u, items) in per_user.iter().enumerate() {
        let mut items = items.clone();
        items.shuffle(rng);
        let k = train_count(items.len(), ratio);
        train.extend(items[..k].iter().map(|&i| (u, i)));
        test.extend(items[k..].iter().map(|&i| (u, i)));
    }
    (train, test)
}

#[derive(Default)]
struct Indexer {
    map: HashMap<u64, usize>,
    labels: Vec<u64>,
}

impl Indexer {
    fn index(&mut self, label: u64) -> usize {
        *self.map.entry(label).or_insert_with(|| {
            self.labels.push(label);
            self.labels.len() - 1
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Parses `id<TAB>id` lines. Blank lines are skipped; further tab-separated
/// columns (ratings, timestamps) are ignored.
pub fn read_pairs(path: &Path) -> Result<Vec<(u64, u64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, path)
}

fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let mut id = |what: &str| -> Result<u64> {
            let f = fields.next().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("missing {what} id"),
            })?;
            f.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("bad {what} id {f:?}"),
            })
        };
        let a = id("first")?;
        let b = id("second")?;
        out.push((a, b));
    }
    Ok(out)
}

/// Parameters of a planted-noise dataset: clustered users and items with
/// within-cluster interactions and friendships, plus labelled cross-cluster
/// noise friendships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub cluster_count: usize,
    pub users_per_cluster: usize,
    pub items_per_cluster: usize,
    pub interaction_rate: f64,
    pub intra_social_rate: f64,
    /// Noise edges added, as a fraction of the genuine edge count.
    pub noise_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
}

fn default_split_ratio() -> f64 {
    0.8
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            cluster_count: 2,
            users_per_cluster: 100,
            items_per_cluster: 100,
            interaction_rate: 0.15,
            intra_social_rate: 0.1,
            noise_fraction: 0.5,
            seed: 0,
            split_ratio: default_split_ratio(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_count == 0 || self.users_per_cluster == 0 || self.items_per_cluster == 0 {
            return Err(Error::Config("cluster, user and item counts must be positive".into()));
        }
        for (name, p) in [
            ("interaction_rate", self.interaction_rate),
            ("intra_social_rate", self.intra_social_rate),
            ("noise_fraction", self.noise_fraction),
            ("split_ratio", self.split_ratio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.noise_fraction > 0.0 && self.cluster_count < 2 {
            return Err(Error::Config("noise edges need at least 2 clusters".into()));
        }
        Ok(())
    }

    pub fn cluster_of_user(&self, user: usize) -> usize {
        user / self.users_per_cluster
    }
}

/// Builds a planted-noise dataset. The returned labels align with
/// [`Dataset::social_edges`]; `true` marks a cross-cluster noise edge.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Vec<bool>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let users = spec.cluster_count * spec.users_per_cluster;
    let items = spec.cluster_count * spec.items_per_cluster;

    let mut per_user = vec![Vec::new(); users];
    for (u, list) in per_user.iter_mut().enumerate() {
        let c = spec.cluster_of_user(u);
        for i in c * spec.items_per_cluster..(c + 1) * spec.items_per_cluster {
            if rng.random::<f64>() < spec.interaction_rate {
                list.push(i);
            }
        }
    }
    if per_user.iter().all(Vec::is_empty) {
        return Err(Error::Config("synthetic rates produced zero interactions".into()));
    }

    let mut genuine = BTreeSet::new();
    for c in 0..spec.cluster_count {
        let lo = c * spec.users_per_cluster;
        let hi = lo + spec.users_per_cluster;
        for a in lo..hi {
            for b in a + 1..hi {
                if rng.random::<f64>() < spec.intra_social_rate {
                    genuine.insert((a, b));
                }
            }
        }
    }

    let noise_count = (spec.noise_fraction * genuine.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let cross_pairs = {
        let total = users * (users - 1) / 2;
        let within = spec.cluster_count * spec.users_per_cluster * (spec.users_per_cluster - 1) / 2;
        total - within
    };
    if noise_count > cross_pairs {
        return Err(Error::Config(format!(
            "{noise_count} noise edges requested but only {cross_pairs} cross-cluster pairs exist"
        )));
    }
    let mut noise = BTreeSet::new();
    while noise.len() < noise_count {
        let a = rng.random_range(0..users);
        let b = rng.random_range(0..users);
        if spec.cluster_of_user(a) == spec.cluster_of_user(b) {
            continue;
        }
        noise.insert((a.min(b), a.max(b)));
    }

    let (train, test) = split_per_user(&per_user, spec.split_ratio, &mut rng);
    let social: Vec<_> = genuine.iter().chain(noise.iter()).copied().collect();
    let dataset = Dataset::new(users, items, train, test, social)?;
    let labels = dataset
        .social_edges()
        .iter()
        .map(|e| noise.contains(e))
        .collect();
    Ok((dataset, labels))
}

/// Writes `a<TAB>b<TAB>0|1` per social edge.
pub fn write_noise_labels(dataset: &Dataset, labels: &[bool], path: &Path) -> Result<()> {
    if labels.len() != dataset.social_edges().len() {
        return Err(Error::Shape(format!(
            "{} labels for {} social edges",
            labels.len(),
            dataset.social_edges().len()
        )));
    }
    let mut out = String::new();
    for (&(a, b), &noisy) in dataset.social_edges().iter().zip(labels) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            dataset.user_label(a),
            dataset.user_label(b),
            u8::from(noisy)
        );
    }
    crate::io::atomic_write(path, out.as_bytes())
}
