//! Rating files, train/test splits and synthetic data.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::probes::CsrMatrix;
use crate::rng::stream_rng;

/// Lowest and highest admissible rating.
pub const RATING_MIN: f64 = 0.5;
pub const RATING_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingFormat {
    /// `user::item::rating::timestamp`.
    DoubleColon,
    /// Header line, then `user,item,rating[,…]`.
    Csv,
}

impl RatingFormat {
    /// `.csv` files are CSV; everything else is `::`-delimited.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => RatingFormat::Csv,
            _ => RatingFormat::DoubleColon,
        }
    }
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dat" | "doublecolon" | "::" => Ok(RatingFormat::DoubleColon),
            "csv" => Ok(RatingFormat::Csv),
            _ => Err(Error::Config(format!("unknown rating format '{s}' (expected dat or csv)"))),
        }
    }
}

impl fmt::Display for RatingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RatingFormat::DoubleColon => "dat",
            RatingFormat::Csv => "csv",
        })
    }
}

/// One observed entry with dense indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Observed ratings with a disjoint train/test split.
///
/// Raw identifiers are mapped to `0..users` and `0..items` in order of first
/// appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingSet {
    pub users: usize,
    pub items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub triples: Vec<Rating>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl RatingSet {
    /// Builds a set from dense triples and splits it.
    pub fn from_triples(users: usize, items: usize, triples: Vec<Rating>, train_frac: f64, seed: u64) -> Result<Self> {
        let mut seen = HashMap::new();
        for (k, r) in triples.iter().enumerate() {
            if r.user >= users || r.item >= items {
                return Err(Error::Dimension(format!(
                    "entry ({}, {}) outside {users}×{items}",
                    r.user, r.item
                )));
            }
            if seen.insert((r.user, r.item), k).is_some() {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("duplicate entry ({}, {})", r.user, r.item),
                });
            }
        }
        let (train, test) = split_indices(triples.len(), train_frac, seed)?;
        Ok(RatingSet {
            users,
            items,
            user_ids: (0..users).map(|i| i.to_string()).collect(),
            item_ids: (0..items).map(|i| i.to_string()).collect(),
            triples,
            train,
            test,
        })
    }

    pub fn train_ratings(&self) -> impl Iterator<Item = &Rating> {
        self.train.iter().map(|&k| &self.triples[k])
    }

    pub fn test_ratings(&self) -> impl Iterator<Item = &Rating> {
        self.test.iter().map(|&k| &self.triples[k])
    }

    pub fn mean_rating(&self) -> f64 {
        if self.triples.is_empty() {
            return 0.0;
        }
        self.triples.iter().map(|r| r.value).sum::<f64>() / self.triples.len() as f64
    }
}

/// Uses every rating of `train` for training and the ratings of `test` whose
/// user and item both occur in `train` for testing; returns the merged set and
/// the number of test ratings dropped.
pub fn with_test_set(train: &RatingSet, test: &RatingSet) -> Result<(RatingSet, usize)> {
    let users: HashMap<&str, usize> = train.user_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let items: HashMap<&str, usize> = train.item_ids.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let mut triples = train.triples.clone();
    let mut seen: HashMap<(usize, usize), ()> = triples.iter().map(|r| ((r.user, r.item), ())).collect();
    let mut dropped = 0;
    let mut test_idx = Vec::new();
    for r in &test.triples {
        let u = users.get(test.user_ids[r.user].as_str());
        let i = items.get(test.item_ids[r.item].as_str());
        match (u, i) {
            (Some(&u), Some(&i)) => {
                if seen.insert((u, i), ()).is_some() {
                    return Err(Error::Parse {
                        line: 0,
                        msg: format!(
                            "user '{}' and item '{}' are rated in both train and test",
                            test.user_ids[r.user], test.item_ids[r.item]
                        ),
                    });
                }
                test_idx.push(triples.len());
                triples.push(Rating { user: u, item: i, value: r.value });
            }
            _ => dropped += 1,
        }
    }
    Ok((
        RatingSet {
            users: train.users,
            items: train.items,
            user_ids: train.user_ids.clone(),
            item_ids: train.item_ids.clone(),
            train: (0..train.triples.len()).collect(),
            test: test_idx,
            triples,
        },
        dropped,
    ))
}

/// `floor(train_frac · count)` indices for training after a seeded
/// Fisher–Yates shuffle; both lists are returned sorted.
pub fn split_indices(count: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Parameter(format!("train fraction must lie in [0, 1], got {train_frac}")));
    }
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let n_train = (train_frac * count as f64).floor() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn parse_line(line: &str, format: RatingFormat, lineno: usize) -> Result<(String, String, f64)> {
    let fields: Vec<&str> = match format {
        RatingFormat::DoubleColon => line.split("::").collect(),
        RatingFormat::Csv => line.split(',').collect(),
    };
    if fields.len() < 3 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected at least 3 fields, found {}", fields.len()),
        });
    }
    let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("rating '{}' is not a number", fields[2].trim()),
    })?;
    if !rating.is_finite() {
        return Err(Error::Parse {
            line: lineno,
            msg: "rating is not finite".into(),
        });
    }
    let user = fields[0].trim();
    let item = fields[1].trim();
    if user.is_empty() || item.is_empty() {
        return Err(Error::Parse {
            line: lineno,
            msg: "empty user or item id".into(),
        });
    }
    Ok((user.to_string(), item.to_string(), rating))
}

/// Parses ratings text; blank lines are skipped and ratings are clamped to
/// `[0.5, 5]`.
pub fn parse_ratings(text: &str, format: RatingFormat, train_frac: f64, seed: u64) -> Result<RatingSet> {
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = HashMap::new();
    let mut triples = Vec::new();
    let skip = usize::from(format == RatingFormat::Csv);
    for (k, line) in text.lines().enumerate().skip(skip) {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (u, i, r) = parse_line(line, format, lineno)?;
        let nu = users.len();
        let ui = *users.entry(u.clone()).or_insert_with(|| {
            user_ids.push(u);
            nu
        });
        let ni = items.len();
        let ii = *items.entry(i.clone()).or_insert_with(|| {
            item_ids.push(i);
            ni
        });
        if let Some(prev) = seen.insert((ui, ii), lineno) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "duplicate rating for user '{}' and item '{}' (first seen on line {prev})",
                    user_ids[ui], item_ids[ii]
                ),
            });
        }
        triples.push(Rating {
            user: ui,
            item: ii,
            value: r.clamp(RATING_MIN, RATING_MAX),
        });
    }
    let (train, test) = split_indices(triples.len(), train_frac, seed)?;
    Ok(RatingSet {
        users: user_ids.len(),
        items: item_ids.len(),
        user_ids,
        item_ids,
        triples,
        train,
        test,
    })
}

/// Reads a rating file and splits it deterministically under `seed`.
pub fn load_movielens(path: &Path, format: RatingFormat, train_frac: f64, seed: u64) -> Result<RatingSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_ratings(&text, format, train_frac, seed)
}

/// Writes `user::item::rating::0` lines.
pub fn write_ratings<W: Write>(triples: &[Rating], out: &mut W) -> std::io::Result<()> {
    for r in triples {
        writeln!(out, "{}::{}::{}::0", r.user, r.item, r.value)?;
    }
    Ok(())
}

/// Rank-`rank` matrix with entries in `[0.5, 5]` and a random subset of
/// `floor(observed_frac · rows · cols)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCompletion {
    pub truth: DMatrix<f64>,
    pub observed: Vec<Rating>,
}

/// `U Vᵀ · 5/rank` with `U, V` uniform on `[0.5, 1]`, rounded to two
/// decimals and clamped to the rating range.
pub fn synthetic_completion(rows: usize, cols: usize, rank: usize, observed_frac: f64, seed: u64) -> Result<SyntheticCompletion> {
    if rows < 1 || cols < 1 || rank < 1 {
        return Err(Error::Parameter("synthetic sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&observed_frac) {
        return Err(Error::Parameter(format!("observed fraction must lie in [0, 1], got {observed_frac}")));
    }
    let mut rng = stream_rng(seed, 0);
    let u = DMatrix::from_fn(rows, rank, |_, _| 0.5 + 0.5 * rng.random::<f64>());
    let v = DMatrix::from_fn(cols, rank, |_, _| 0.5 + 0.5 * rng.random::<f64>());
    let truth = (u * v.transpose() * (RATING_MAX / rank as f64))
        .map(|x| ((x * 100.0).round() / 100.0).clamp(RATING_MIN, RATING_MAX));
    let mut cells: Vec<(usize, usize)> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).collect();
    cells.shuffle(&mut stream_rng(seed, 1));
    let n = (observed_frac * cells.len() as f64).floor() as usize;
    let mut chosen = cells[..n].to_vec();
    chosen.sort_unstable();
    let observed = chosen
        .into_iter()
        .map(|(i, j)| Rating {
            user: i,
            item: j,
            value: truth[(i, j)],
        })
        .collect();
    Ok(SyntheticCompletion { truth, observed })
}

/// Whitespace-delimited matrix, one row per line.
pub fn write_matrix<W: Write>(m: &DMatrix<f64>, out: &mut W) -> std::io::Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.12e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Parses a whitespace-delimited numeric matrix; blank lines and lines
/// starting with `#` or `%` are skipped.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('%') {
            continue;
        }
        let row = t
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: k + 1,
                    msg: format!("'{s}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parses a MatrixMarket `coordinate real` file, `symmetric` or `general`.
/// Symmetric files list one triangle; both are stored.
pub fn parse_matrix_market(text: &str) -> Result<CsrMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty MatrixMarket file".into(),
    })?;
    let h: Vec<String> = header.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    if h.len() < 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" || h[2] != "coordinate" {
        return Err(Error::Parse {
            line: 1,
            msg: "expected '%%MatrixMarket matrix coordinate <field> <symmetry>'".into(),
        });
    }
    if !matches!(h[3].as_str(), "real" | "integer" | "double") {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported field '{}'", h[3]),
        });
    }
    let symmetric = match h[4].as_str() {
        "symmetric" => true,
        "general" => false,
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unsupported symmetry '{other}'"),
            })
        }
    };
    let num = |s: &str, line: usize| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Parse {
            line,
            msg: format!("'{s}' is not a number"),
        })
    };
    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    for (k, line) in lines {
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        let lineno = k + 1;
        match size {
            None => {
                if f.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "expected 'rows cols entries'".into(),
                    });
                }
                let v: Vec<usize> = f
                    .iter()
                    .map(|x| {
                        x.parse::<usize>().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("'{x}' is not a count"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if v[0] != v[1] {
                    return Err(Error::Dimension(format!("matrix is {}×{}, expected square", v[0], v[1])));
                }
                size = Some((v[0], v[1], v[2]));
            }
            Some((n, _, _)) => {
                if f.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "expected 'row col value'".into(),
                    });
                }
                let r = num(f[0], lineno)? as usize;
                let c = num(f[1], lineno)? as usize;
                let v = num(f[2], lineno)?;
                if r < 1 || c < 1 || r > n || c > n {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("index ({r}, {c}) outside {n}×{n}"),
                    });
                }
                triplets.push((r - 1, c - 1, v));
                if symmetric && r != c {
                    triplets.push((c - 1, r - 1, v));
                }
            }
        }
    }
    let (n, _, nnz) = size.ok_or(Error::Parse {
        line: 1,
        msg: "missing size line".into(),
    })?;
    let listed = if symmetric {
        triplets.iter().filter(|t| t.0 >= t.1).count()
    } else {
        triplets.len()
    };
    if listed != nnz {
        return Err(Error::Parse {
            line: 2,
            msg: format!("size line declares {nnz} entries, found {listed}"),
        });
    }
    CsrMatrix::from_triplets(n, &triplets)
}

/// Reads a symmetric matrix: MatrixMarket for `.mtx`, dense text otherwise.
/// Entries must satisfy `|A_ij − A_ji| ≤ 1e-12 · max|A|`.
pub fn load_symmetric_matrix(path: &Path) -> Result<CsrMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let is_mtx = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mtx"));
    let m = if is_mtx {
        parse_matrix_market(&text)?
    } else {
        let rows = parse_matrix(&text)?;
        let n = rows.len();
        if n == 0 || rows[0].len() != n {
            return Err(Error::Dimension(format!(
                "dense matrix must be square, got {n} rows of {} columns",
                rows.first().map_or(0, |r| r.len())
            )));
        }
        let trip: Vec<(usize, usize, f64)> = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, &v)| (i, j, v)))
            .collect();
        CsrMatrix::from_triplets(n, &trip)?
    };
    let scale = m.to_dense().amax().max(f64::MIN_POSITIVE);
    let asym = m.asymmetry();
    if asym > 1e-12 * scale {
        return Err(Error::Dimension(format!(
            "matrix in {} is not symmetric (max |A_ij - A_ji| = {asym:e})",
            path.display()
        )));
    }
    Ok(m)
}
