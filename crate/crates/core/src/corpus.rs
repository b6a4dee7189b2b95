//! Interaction tables, popularity counts, scenario splits and a synthetic
//! dataset generator.
//!
//! All tables use 0-based integer ids. On disk a table is one pair per line;
//! any whitespace separates the two ids on read and a tab is written.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const USER_BUNDLE_FILE: &str = "user_bundle.txt";
pub const USER_ITEM_FILE: &str = "user_item.txt";
pub const BUNDLE_ITEM_FILE: &str = "bundle_item.txt";
pub const DATA_SIZE_FILE: &str = "data_size.txt";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: pair ({left}, {right}) out of range for a {n_left}x{n_right} table")]
    IdOutOfRange {
        line: usize,
        left: usize,
        right: usize,
        n_left: usize,
        n_right: usize,
    },
    #[error("cardinality mismatch: {0}")]
    CardinalityMismatch(String),
    #[error("bundles without affiliated items: {0:?}")]
    DegenerateBundles(Vec<usize>),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A deduplicated set of (left, right) id pairs with declared cardinalities.
///
/// Pairs are kept sorted, which makes every derived structure independent of
/// the order in which the pairs were read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionTable {
    pairs: Vec<(usize, usize)>,
    n_left: usize,
    n_right: usize,
}

impl InteractionTable {
    pub fn new(
        pairs: impl IntoIterator<Item = (usize, usize)>,
        n_left: usize,
        n_right: usize,
    ) -> Result<Self, CorpusError> {
        let mut pairs: Vec<_> = pairs.into_iter().collect();
        for (idx, &(l, r)) in pairs.iter().enumerate() {
            if l >= n_left || r >= n_right {
                return Err(CorpusError::IdOutOfRange {
                    line: idx + 1,
                    left: l,
                    right: r,
                    n_left,
                    n_right,
                });
            }
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Self {
            pairs,
            n_left,
            n_right,
        })
    }

    pub fn empty(n_left: usize, n_right: usize) -> Self {
        Self {
            pairs: Vec::new(),
            n_left,
            n_right,
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_right(&self) -> usize {
        self.n_right
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair: (usize, usize)) -> bool {
        self.pairs.binary_search(&pair).is_ok()
    }

    /// Right ids grouped by left id.
    pub fn right_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.n_left];
        for &(l, r) in &self.pairs {
            lists[l].push(r);
        }
        lists
    }

    pub fn pair_set(&self) -> HashSet<(usize, usize)> {
        self.pairs.iter().copied().collect()
    }

    /// Same pairs with different declared cardinalities.
    pub fn with_dims(&self, n_left: usize, n_right: usize) -> Result<Self, CorpusError> {
        Self::new(self.pairs.iter().copied(), n_left, n_right)
    }
}

/// Reads pairs from any reader; line numbers in errors are 1-based.
pub fn read_pairs<R: Read>(
    reader: R,
    n_left: usize,
    n_right: usize,
) -> Result<InteractionTable, CorpusError> {
    let mut pairs = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(first) = fields.next() else { continue };
        let parse = |s: Option<&str>| -> Result<usize, CorpusError> {
            let s = s.ok_or_else(|| CorpusError::Parse {
                line: line_no,
                message: "expected two ids".into(),
            })?;
            s.parse().map_err(|_| CorpusError::Parse {
                line: line_no,
                message: format!("invalid id {s:?}"),
            })
        };
        let l = parse(Some(first))?;
        let r = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(CorpusError::Parse {
                line: line_no,
                message: "expected exactly two ids".into(),
            });
        }
        if l >= n_left || r >= n_right {
            return Err(CorpusError::IdOutOfRange {
                line: line_no,
                left: l,
                right: r,
                n_left,
                n_right,
            });
        }
        pairs.push((l, r));
    }
    InteractionTable::new(pairs, n_left, n_right)
}

pub fn load_pairs(
    path: impl AsRef<Path>,
    n_left: usize,
    n_right: usize,
) -> Result<InteractionTable, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_pairs(file, n_left, n_right)
}

pub fn write_pairs_to<W: Write>(table: &InteractionTable, mut out: W) -> std::io::Result<()> {
    for &(l, r) in table.pairs() {
        writeln!(out, "{l}\t{r}")?;
    }
    out.flush()
}

pub fn write_pairs(table: &InteractionTable, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_pairs_to(table, std::io::BufWriter::new(file)).map_err(io_err(path))
}

/// User-bundle interactions, user-item interactions and bundle-item affiliations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    pub ub: InteractionTable,
    pub ui: InteractionTable,
    pub bi: InteractionTable,
    pub u_count: usize,
    pub b_count: usize,
    pub i_count: usize,
}

impl DatasetBundle {
    /// Validates shared cardinalities and rejects bundles with no items.
    pub fn new(
        ub: InteractionTable,
        ui: InteractionTable,
        bi: InteractionTable,
    ) -> Result<Self, CorpusError> {
        let (u_count, b_count, i_count) = (ub.n_left(), ub.n_right(), ui.n_right());
        if ui.n_left() != u_count {
            return Err(CorpusError::CardinalityMismatch(format!(
                "user_bundle has {u_count} users but user_item has {}",
                ui.n_left()
            )));
        }
        if bi.n_left() != b_count {
            return Err(CorpusError::CardinalityMismatch(format!(
                "user_bundle has {b_count} bundles but bundle_item has {}",
                bi.n_left()
            )));
        }
        if bi.n_right() != i_count {
            return Err(CorpusError::CardinalityMismatch(format!(
                "user_item has {i_count} items but bundle_item has {}",
                bi.n_right()
            )));
        }
        let mut has_items = vec![false; b_count];
        for &(b, _) in bi.pairs() {
            has_items[b] = true;
        }
        let degenerate: Vec<usize> = (0..b_count).filter(|&b| !has_items[b]).collect();
        if !degenerate.is_empty() {
            return Err(CorpusError::DegenerateBundles(degenerate));
        }
        Ok(Self {
            ub,
            ui,
            bi,
            u_count,
            b_count,
            i_count,
        })
    }

    /// Loads `user_bundle.txt`, `user_item.txt` and `bundle_item.txt` from `dir`.
    ///
    /// Cardinalities come from `data_size.txt` (or any `*_data_size.txt`)
    /// holding `U B I`; without one they are inferred as max id + 1. When
    /// `user_bundle.txt` is absent, the pre-split `user_bundle_{train,tune,test}.txt`
    /// files are merged instead.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let sizes = read_data_size(dir)?;

        let ub_parts: Vec<PathBuf> = if dir.join(USER_BUNDLE_FILE).exists() {
            vec![dir.join(USER_BUNDLE_FILE)]
        } else {
            let parts: Vec<PathBuf> = ["train", "tune", "test"]
                .iter()
                .map(|s| dir.join(format!("user_bundle_{s}.txt")))
                .filter(|p| p.exists())
                .collect();
            if parts.is_empty() {
                vec![dir.join(USER_BUNDLE_FILE)]
            } else {
                parts
            }
        };

        let mut ub_raw = Vec::new();
        for p in &ub_parts {
            ub_raw.extend(load_pairs(p, usize::MAX, usize::MAX)?.pairs);
        }
        let ui_raw = load_pairs(dir.join(USER_ITEM_FILE), usize::MAX, usize::MAX)?.pairs;
        let bi_raw = load_pairs(dir.join(BUNDLE_ITEM_FILE), usize::MAX, usize::MAX)?.pairs;

        let (u, b, i) = match sizes {
            Some(s) => s,
            None => {
                let max_or_zero =
                    |it: &mut dyn Iterator<Item = usize>| it.max().map_or(0, |m| m + 1);
                let u = max_or_zero(&mut ub_raw.iter().chain(&ui_raw).map(|p| p.0));
                let b = max_or_zero(&mut ub_raw.iter().map(|p| p.1).chain(bi_raw.iter().map(|p| p.0)));
                let i = max_or_zero(&mut ui_raw.iter().chain(&bi_raw).map(|p| p.1));
                (u, b, i)
            }
        };
        let ub = InteractionTable::new(ub_raw, u, b)?;
        let ui = InteractionTable::new(ui_raw, u, i)?;
        let bi = InteractionTable::new(bi_raw, b, i)?;
        Self::new(ub, ui, bi)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_pairs(&self.ub, dir.join(USER_BUNDLE_FILE))?;
        write_pairs(&self.ui, dir.join(USER_ITEM_FILE))?;
        write_pairs(&self.bi, dir.join(BUNDLE_ITEM_FILE))?;
        let size_path = dir.join(DATA_SIZE_FILE);
        fs::write(
            &size_path,
            format!("{}\t{}\t{}\n", self.u_count, self.b_count, self.i_count),
        )
        .map_err(io_err(&size_path))
    }
}

fn read_data_size(dir: &Path) -> Result<Option<(usize, usize, usize)>, CorpusError> {
    let mut path = dir.join(DATA_SIZE_FILE);
    if !path.exists() {
        let Ok(entries) = fs::read_dir(dir) else {
            return Ok(None);
        };
        let mut found: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.ends_with("_data_size.txt"))
            })
            .collect();
        found.sort();
        match found.into_iter().next() {
            Some(p) => path = p,
            None => return Ok(None),
        }
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|s| {
            s.parse().map_err(|_| CorpusError::Parse {
                line: 1,
                message: format!("{}: invalid count {s:?}", path.display()),
            })
        })
        .collect::<Result<_, _>>()?;
    match nums.as_slice() {
        [u, b, i] => Ok(Some((*u, *b, *i))),
        _ => Err(CorpusError::Parse {
            line: 1,
            message: format!("{}: expected three counts", path.display()),
        }),
    }
}

/// Number of distinct training users per bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityIndex {
    counts: Vec<u64>,
}

impl PopularityIndex {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn count(&self, bundle: usize) -> u64 {
        self.counts[bundle]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bundles with at least one training interaction, ascending.
    pub fn warm_bundles(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&b| self.counts[b] > 0).collect()
    }

    pub fn cold_bundles(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&b| self.counts[b] == 0).collect()
    }
}

pub fn popularity_counts(train_ub: &InteractionTable) -> PopularityIndex {
    let mut counts = vec![0u64; train_ub.n_right()];
    for &(_, b) in train_ub.pairs() {
        counts[b] += 1;
    }
    PopularityIndex { counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Warm,
    Cold,
    All,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Warm => "warm",
            Scenario::Cold => "cold",
            Scenario::All => "all",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warm" => Ok(Scenario::Warm),
            "cold" => Ok(Scenario::Cold),
            "all" => Ok(Scenario::All),
            other => Err(CorpusError::InvalidParameter(format!(
                "unknown scenario {other:?} (expected warm, cold or all)"
            ))),
        }
    }
}

/// Train/validation/test partition of the user-bundle interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSplit {
    pub scenario: Scenario,
    pub train: InteractionTable,
    pub val: InteractionTable,
    pub test: InteractionTable,
    /// Bundles with at least one training interaction.
    pub warm_bundles: Vec<usize>,
    /// Every other bundle.
    pub cold_bundles: Vec<usize>,
}

impl ScenarioSplit {
    fn from_parts(
        scenario: Scenario,
        train: Vec<(usize, usize)>,
        val: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
        u: usize,
        b: usize,
    ) -> Result<Self, CorpusError> {
        let train = InteractionTable::new(train, u, b)?;
        let pop = popularity_counts(&train);
        Ok(Self {
            scenario,
            val: InteractionTable::new(val, u, b)?,
            test: InteractionTable::new(test, u, b)?,
            warm_bundles: pop.warm_bundles(),
            cold_bundles: pop.cold_bundles(),
            train,
        })
    }

    /// Writes `{scenario}_{train,val,test}.txt` and `{scenario}_cold_bundles.txt`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let s = self.scenario;
        write_pairs(&self.train, dir.join(format!("{s}_train.txt")))?;
        write_pairs(&self.val, dir.join(format!("{s}_val.txt")))?;
        write_pairs(&self.test, dir.join(format!("{s}_test.txt")))?;
        let cold_path = dir.join(format!("{s}_cold_bundles.txt"));
        let mut text = String::new();
        for b in &self.cold_bundles {
            text.push_str(&b.to_string());
            text.push('\n');
        }
        fs::write(&cold_path, text).map_err(io_err(&cold_path))
    }

    /// Reads the pair files written by [`ScenarioSplit::write_dir`]; warm and
    /// cold bundles are recomputed from the training pairs.
    pub fn load_dir(
        dir: impl AsRef<Path>,
        scenario: Scenario,
        n_users: usize,
        n_bundles: usize,
    ) -> Result<Self, CorpusError> {
        let dir = dir.as_ref();
        let load = |part: &str| -> Result<Vec<(usize, usize)>, CorpusError> {
            let t = load_pairs(dir.join(format!("{scenario}_{part}.txt")), n_users, n_bundles)?;
            Ok(t.pairs().to_vec())
        };
        Self::from_parts(scenario, load("train")?, load("val")?, load("test")?, n_users, n_bundles)
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Floor for train and validation, remainder to test.
fn partition_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // The epsilon absorbs representation error such as 0.7 * 10 = 6.999...
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_train = floor(ratios.0).min(n);
    let n_val = floor(ratios.1).min(n - n_train);
    (n_train, n_val, n - n_train - n_val)
}

fn check_ratios(r: (f64, f64, f64)) -> Result<(), CorpusError> {
    let ok = [r.0, r.1, r.2].iter().all(|x| x.is_finite() && *x >= 0.0)
        && (r.0 + r.1 + r.2 - 1.0).abs() < 1e-9;
    if ok {
        Ok(())
    } else {
        Err(CorpusError::InvalidRatios(r))
    }
}

/// Splits the user-bundle interactions of `data` under one of the three
/// evaluation scenarios. Deterministic given `seed`.
///
/// * `warm`: interaction-level split.
/// * `cold`: bundle-level split over bundles with at least one interaction;
///   every interaction of a validation or test bundle leaves training.
/// * `all`: interaction-level split where half of the held-out interactions
///   belong to bundles removed from training and half to bundles that keep at
///   least one training interaction.
pub fn split_scenario(
    data: &DatasetBundle,
    scenario: Scenario,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<ScenarioSplit, CorpusError> {
    check_ratios(ratios)?;
    if data.ub.is_empty() {
        return Err(CorpusError::InsufficientData(
            "no user-bundle interactions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u, b) = (data.u_count, data.b_count);
    match scenario {
        Scenario::Warm => {
            let mut pairs = data.ub.pairs().to_vec();
            pairs.shuffle(&mut rng);
            let (n_train, n_val, n_test) = partition_sizes(pairs.len(), ratios);
            if n_train == 0 || n_test == 0 {
                return Err(CorpusError::InsufficientData(format!(
                    "{} interactions cannot fill train and test",
                    pairs.len()
                )));
            }
            let test = pairs.split_off(n_train + n_val);
            let val = pairs.split_off(n_train);
            ScenarioSplit::from_parts(scenario, pairs, val, test, u, b)
        }
        Scenario::Cold => {
            let by_bundle = bundle_groups(&data.ub);
            let mut active: Vec<usize> = (0..b).filter(|&x| !by_bundle[x].is_empty()).collect();
            active.shuffle(&mut rng);
            let (n_train, n_val, n_test) = partition_sizes(active.len(), ratios);
            if n_train == 0 || n_test == 0 {
                return Err(CorpusError::InsufficientData(format!(
                    "{} interacted bundles cannot fill train and test",
                    active.len()
                )));
            }
            let collect = |ids: &[usize]| -> Vec<(usize, usize)> {
                ids.iter()
                    .flat_map(|&x| by_bundle[x].iter().map(move |&uu| (uu, x)))
                    .collect()
            };
            let train = collect(&active[..n_train]);
            let val = collect(&active[n_train..n_train + n_val]);
            let test = collect(&active[n_train + n_val..]);
            ScenarioSplit::from_parts(scenario, train, val, test, u, b)
        }
        Scenario::All => split_all(data, ratios, &mut rng),
    }
}

fn bundle_groups(ub: &InteractionTable) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); ub.n_right()];
    for &(uu, bb) in ub.pairs() {
        groups[bb].push(uu);
    }
    groups
}

fn split_all(
    data: &DatasetBundle,
    ratios: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<ScenarioSplit, CorpusError> {
    let n = data.ub.len();
    let (_, n_val, n_test) = partition_sizes(n, ratios);
    let holdout = n_val + n_test;
    let cold_target = holdout / 2;
    if n_test == 0 || cold_target == 0 {
        return Err(CorpusError::InsufficientData(format!(
            "{n} interactions cannot fill warm and cold test halves"
        )));
    }

    let by_bundle = bundle_groups(&data.ub);
    let mut active: Vec<usize> = (0..data.b_count)
        .filter(|&x| !by_bundle[x].is_empty())
        .collect();
    active.shuffle(rng);

    // Whole bundles go cold until their interactions fill half the holdout.
    let mut is_cold = vec![false; data.b_count];
    let mut cold_total = 0;
    for &bb in &active {
        if cold_total == cold_target {
            break;
        }
        let c = by_bundle[bb].len();
        if cold_total + c <= cold_target {
            is_cold[bb] = true;
            cold_total += c;
        }
    }
    if cold_total == 0 {
        return Err(CorpusError::InsufficientData(
            "every bundle has more interactions than the cold half allows".into(),
        ));
    }

    let mut cold_pairs: Vec<(usize, usize)> = Vec::with_capacity(cold_total);
    let mut anchors = Vec::new();
    let mut warm_rest = Vec::new();
    for &bb in &active {
        let mut users: Vec<(usize, usize)> = by_bundle[bb].iter().map(|&uu| (uu, bb)).collect();
        if is_cold[bb] {
            cold_pairs.extend(users);
        } else {
            users.shuffle(rng);
            anchors.push(users[0]);
            warm_rest.extend_from_slice(&users[1..]);
        }
    }
    cold_pairs.shuffle(rng);
    warm_rest.shuffle(rng);

    let val_cold = cold_total * n_val / holdout;
    let test_cold = cold_total - val_cold;
    let val_warm = n_val - val_cold;
    let test_warm = n_test - test_cold;
    if val_warm + test_warm > warm_rest.len() {
        return Err(CorpusError::InsufficientData(
            "warm bundles lack interactions beyond their training anchors".into(),
        ));
    }

    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    val.extend_from_slice(&cold_pairs[..val_cold]);
    test.extend_from_slice(&cold_pairs[val_cold..]);
    val.extend_from_slice(&warm_rest[..val_warm]);
    test.extend_from_slice(&warm_rest[val_warm..val_warm + test_warm]);
    let mut train = anchors;
    train.extend_from_slice(&warm_rest[val_warm + test_warm..]);

    ScenarioSplit::from_parts(Scenario::All, train, val, test, data.u_count, data.b_count)
}

/// Parameters for [`gen_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub bundles: usize,
    pub items: usize,
    pub zipf_exponent: f64,
    pub interactions: usize,
    pub seed: u64,
}

const MAX_BUNDLE_SIZE: usize = 20;
const MAX_TOPICS: usize = 10;
const IN_TOPIC_ITEM_PROB: f64 = 0.9;
const IN_TOPIC_USER_PROB: f64 = 0.8;
const BUNDLE_ITEM_ADOPTION_PROB: f64 = 0.5;
const TOPIC_ITEMS_PER_USER: usize = 2;
const NOISE_ITEMS_PER_USER: usize = 1;
const USER_REDRAWS: usize = 20;

/// Generates a dataset with power-law bundle popularity and latent topics.
///
/// Users, items and bundles each belong to one of up to ten topics. Bundles
/// draw 1 to 20 items, mostly from their own topic; bundle popularity is
/// `rank^-zipf_exponent` over a random ranking, and the interacting user is
/// usually drawn from the bundle's topic. User-item pairs adopt each item of
/// an interacted bundle with probability 1/2, plus a few in-topic items and
/// one uniformly random item per user.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle, CorpusError> {
    let SyntheticSpec {
        users,
        bundles,
        items,
        zipf_exponent,
        interactions,
        seed,
    } = *spec;
    if users == 0 || bundles == 0 || items == 0 {
        return Err(CorpusError::InvalidParameter(
            "users, bundles and items must be at least 1".into(),
        ));
    }
    if !(zipf_exponent.is_finite() && zipf_exponent > 0.0) {
        return Err(CorpusError::InvalidParameter(format!(
            "zipf exponent must be positive, got {zipf_exponent}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topics = users.min(bundles).min(items).min(MAX_TOPICS);

    let topic_items: Vec<Vec<usize>> = (0..topics)
        .map(|t| (t..items).step_by(topics).collect())
        .collect();
    let topic_users: Vec<Vec<usize>> = (0..topics)
        .map(|t| (t..users).step_by(topics).collect())
        .collect();
    let bundle_topic: Vec<usize> = (0..bundles).map(|_| rng.random_range(0..topics)).collect();

    let mut bi = Vec::new();
    for (bb, &topic) in bundle_topic.iter().enumerate() {
        let size = rng.random_range(1..=MAX_BUNDLE_SIZE.min(items));
        let mut chosen = BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < size && attempts < 50 * size {
            attempts += 1;
            let item = if rng.random::<f64>() < IN_TOPIC_ITEM_PROB {
                *topic_items[topic].choose(&mut rng).expect("non-empty topic")
            } else {
                rng.random_range(0..items)
            };
            chosen.insert(item);
        }
        bi.extend(chosen.into_iter().map(|i| (bb, i)));
    }

    let mut ranks: Vec<usize> = (0..bundles).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-zipf_exponent))
        .collect();
    let popularity = WeightedIndex::new(&weights).expect("positive weights");

    let mut ub = BTreeSet::new();
    let target = interactions.min(users * bundles);
    let cap = 50 * target + 100;
    let mut attempts = 0;
    while ub.len() < target && attempts < cap {
        attempts += 1;
        let bb = popularity.sample(&mut rng);
        // A repeated pair redraws the user, not the bundle, so deduplication
        // does not flatten the popularity law.
        for _ in 0..USER_REDRAWS {
            let uu = if rng.random::<f64>() < IN_TOPIC_USER_PROB {
                *topic_users[bundle_topic[bb]]
                    .choose(&mut rng)
                    .expect("non-empty topic")
            } else {
                rng.random_range(0..users)
            };
            if ub.insert((uu, bb)) {
                break;
            }
        }
    }

    let bundle_items: Vec<Vec<usize>> = {
        let mut lists = vec![Vec::new(); bundles];
        for &(bb, i) in &bi {
            lists[bb].push(i);
        }
        lists
    };
    let mut ui = BTreeSet::new();
    for &(uu, bb) in &ub {
        for &i in &bundle_items[bb] {
            if rng.random::<f64>() < BUNDLE_ITEM_ADOPTION_PROB {
                ui.insert((uu, i));
            }
        }
    }
    for uu in 0..users {
        let pool = &topic_items[uu % topics];
        for _ in 0..TOPIC_ITEMS_PER_USER {
            ui.insert((uu, *pool.choose(&mut rng).expect("non-empty topic")));
        }
        for _ in 0..NOISE_ITEMS_PER_USER {
            ui.insert((uu, rng.random_range(0..items)));
        }
    }

    DatasetBundle::new(
        InteractionTable::new(ub, users, bundles)?,
        InteractionTable::new(ui, users, items)?,
        InteractionTable::new(bi, bundles, items)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(pairs: &[(usize, usize)], l: usize, r: usize) -> InteractionTable {
        InteractionTable::new(pairs.iter().copied(), l, r).unwrap()
    }

    fn toy_dataset(ub: &[(usize, usize)], u: usize, b: usize) -> DatasetBundle {
        let bi: Vec<_> = (0..b).map(|x| (x, 0)).collect();
        DatasetBundle::new(table(ub, u, b), InteractionTable::empty(u, 1), table(&bi, b, 1)).unwrap()
    }

    #[test]
    fn load_collapses_duplicates() {
        let t = read_pairs("0\t1\n0\t1\n2\t0\n".as_bytes(), 3, 2).unwrap();
        assert_eq!(t.pairs(), &[(0, 1), (2, 0)]);
    }

    #[test]
    fn load_empty_file() {
        let t = read_pairs("".as_bytes(), 3, 2).unwrap();
        assert!(t.is_empty());
        assert_eq!((t.n_left(), t.n_right()), (3, 2));
    }

    #[test]
    fn load_rejects_out_of_range() {
        let err = read_pairs("0\t5\n".as_bytes(), 3, 2).unwrap_err();
        match err {
            CorpusError::IdOutOfRange {
                line, left, right, ..
            } => assert_eq!((line, left, right), (1, 0, 5)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn load_reports_parse_line() {
        let err = read_pairs("0 1\n\n1 x\n".as_bytes(), 3, 2).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 3, .. }), "{err}");
        let err = read_pairs("0\n".as_bytes(), 3, 2).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn popularity_examples() {
        let p = popularity_counts(&table(&[(0, 0), (1, 0), (2, 1)], 3, 2));
        assert_eq!(p.counts(), &[2, 1]);
        let p = popularity_counts(&InteractionTable::empty(4, 3));
        assert_eq!(p.counts(), &[0, 0, 0]);
    }

    #[test]
    fn degenerate_bundles_rejected() {
        let err = DatasetBundle::new(
            InteractionTable::empty(1, 3),
            InteractionTable::empty(1, 2),
            table(&[(1, 0)], 3, 2),
        )
        .unwrap_err();
        match err {
            CorpusError::DegenerateBundles(ids) => assert_eq!(ids, vec![0, 2]),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn warm_split_sizes() {
        let ub: Vec<_> = (0..10).map(|x| (x, x % 3)).collect();
        let s = split_scenario(&toy_dataset(&ub, 10, 3), Scenario::Warm, DEFAULT_RATIOS, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
    }

    #[test]
    fn bad_ratios_rejected() {
        let ub: Vec<_> = (0..10).map(|x| (x, 0)).collect();
        let d = toy_dataset(&ub, 10, 1);
        assert!(matches!(
            split_scenario(&d, Scenario::Warm, (0.5, 0.1, 0.1), 1),
            Err(CorpusError::InvalidRatios(_))
        ));
    }

    #[test]
    fn tiny_data_is_insufficient() {
        let d = toy_dataset(&[(0, 0)], 1, 1);
        assert!(matches!(
            split_scenario(&d, Scenario::Warm, DEFAULT_RATIOS, 1),
            Err(CorpusError::InsufficientData(_))
        ));
        assert!(matches!(
            split_scenario(&d, Scenario::Cold, DEFAULT_RATIOS, 1),
            Err(CorpusError::InsufficientData(_))
        ));
    }

    #[test]
    fn scenario_parse() {
        assert_eq!("cold".parse::<Scenario>().unwrap(), Scenario::Cold);
        assert!("lukewarm".parse::<Scenario>().is_err());
    }

    #[test]
    fn synthetic_without_interactions() {
        let d = gen_synthetic(&SyntheticSpec {
            users: 10,
            bundles: 5,
            items: 30,
            zipf_exponent: 1.0,
            interactions: 0,
            seed: 3,
        })
        .unwrap();
        assert!(d.ub.is_empty());
        let sizes = d.bi.right_lists();
        assert!(sizes.iter().all(|s| (1..=20).contains(&s.len())));
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        let mut spec = SyntheticSpec {
            users: 10,
            bundles: 5,
            items: 30,
            zipf_exponent: 0.0,
            interactions: 10,
            seed: 3,
        };
        assert!(gen_synthetic(&spec).is_err());
        spec.zipf_exponent = 1.0;
        spec.items = 0;
        assert!(gen_synthetic(&spec).is_err());
    }
}
