//! Embedding, label and Gram value types, the orthogonal-frame and simplex
//! ETF constructors, and the projection onto the feasible sets.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance for unit-norm and non-negativity checks.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Per-example class labels `y_i ∈ {0..k-1}` with cached class counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LabelSet {
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl LabelSet {
    /// Builds a label set; `k` is inferred as `max(labels) + 1` and every
    /// class in `0..k` must be present.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("label set is empty".into()));
        }
        let k = labels.iter().copied().max().unwrap_or(0) + 1;
        let mut counts = vec![0usize; k];
        for &y in &labels {
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "class {c} has no members (labels must cover 0..{k})"
            )));
        }
        Ok(Self { labels, counts })
    }

    /// Contiguous blocks: `counts[0]` examples of class 0, then class 1, ...
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("counts are empty".into()));
        }
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "class counts must be positive".into(),
            ));
        }
        let labels = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        Self::new(labels)
    }

    pub fn balanced(k: usize, per_class: usize) -> Result<Self> {
        Self::from_counts(&vec![per_class; k])
    }

    /// STEP imbalance: the first `⌈k/2⌉` classes hold `ratio · n_min`
    /// examples, the rest `n_min`.
    pub fn step(k: usize, ratio: f64, n_min: usize) -> Result<Self> {
        let n_max = majority_size(ratio, n_min)?;
        let majors = k.div_ceil(2);
        let counts: Vec<usize> = (0..k)
            .map(|c| if c < majors { n_max } else { n_min })
            .collect();
        Self::from_counts(&counts)
    }

    /// Long-tail imbalance: `n_c = round(n_max · ratio^(-c/(k-1)))` with
    /// `n_max = ratio · n_min`.
    pub fn long_tail(k: usize, ratio: f64, n_min: usize) -> Result<Self> {
        let n_max = majority_size(ratio, n_min)?;
        if k == 1 {
            return Self::from_counts(&[n_max]);
        }
        let counts: Vec<usize> = (0..k)
            .map(|c| {
                let expo = -(c as f64) / ((k - 1) as f64);
                ((n_max as f64) * ratio.powf(expo)).round().max(1.0) as usize
            })
            .collect();
        Self::from_counts(&counts)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Indices of the examples in class `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == c).then_some(i))
            .collect()
    }

    pub fn n_min(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    /// Imbalance ratio `max_c n_c / min_c n_c`.
    pub fn imbalance_ratio(&self) -> f64 {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        max as f64 / self.n_min() as f64
    }

    /// Applies a bijective class relabeling `c -> perm[c]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k() {
            return Err(Error::DimensionMismatch {
                what: "class permutation",
                expected: self.k(),
                found: perm.len(),
            });
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidArgument(
                    "relabeling is not a permutation".into(),
                ));
            }
            seen[p] = true;
        }
        Self::new(self.labels.iter().map(|&y| perm[y]).collect())
    }

    /// Reorders examples: output example `i` is input example `order[i]`.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.n())?;
        Self::new(order.iter().map(|&i| self.labels[i]).collect())
    }

    /// Single CSV row of integers.
    pub fn to_csv_string(&self) -> String {
        let row: Vec<String> = self.labels.iter().map(|y| y.to_string()).collect();
        format!("{}\n", row.join(","))
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        let labels = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("label {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

impl TryFrom<Vec<usize>> for LabelSet {
    type Error = Error;

    fn try_from(labels: Vec<usize>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<LabelSet> for Vec<usize> {
    fn from(y: LabelSet) -> Self {
        y.labels
    }
}

fn majority_size(ratio: f64, n_min: usize) -> Result<usize> {
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "imbalance ratio {ratio} must be >= 1"
        )));
    }
    if n_min == 0 {
        return Err(Error::InvalidArgument("n_min must be positive".into()));
    }
    let exact = ratio * n_min as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 * exact {
        return Err(Error::InvalidArgument(format!(
            "ratio * n_min = {exact} is not an integer"
        )));
    }
    Ok(rounded as usize)
}

pub(crate) fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::DimensionMismatch {
            what: "permutation",
            expected: n,
            found: order.len(),
        });
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        seen[i] = true;
    }
    Ok(())
}

/// The optimization variable: a `d × n` matrix whose columns are the
/// per-example embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    data: DMatrix<f64>,
}

impl EmbeddingMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "embedding matrix must be at least 1x1".into(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "embedding matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidArgument("no columns".into()));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    /// Neural-collapse configuration: every example sits exactly on its
    /// class's column of `means`.
    pub fn collapsed(means: &MeanMatrix, y: &LabelSet) -> Result<Self> {
        if means.k() != y.k() {
            return Err(Error::DimensionMismatch {
                what: "class means",
                expected: y.k(),
                found: means.k(),
            });
        }
        let cols: Vec<DVector<f64>> = y
            .labels()
            .iter()
            .map(|&c| means.as_matrix().column(c).into_owned())
            .collect();
        Self::from_columns(&cols)
    }

    pub fn d(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.data.column(i).into_owned()
    }

    pub fn gram(&self) -> GramMatrix {
        GramMatrix::from_factor(&self.data)
    }

    /// Reports the first violated feasibility constraint, if any.
    pub fn check_feasible(&self, nonneg: bool, tol: f64) -> Result<()> {
        for (i, col) in self.data.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > tol {
                return Err(Error::Infeasible(format!("column {i} has norm {norm}")));
            }
            if nonneg {
                if let Some(v) = col.iter().find(|&&v| v < -tol) {
                    return Err(Error::Infeasible(format!(
                        "column {i} has negative entry {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_feasible(&self, nonneg: bool, tol: f64) -> bool {
        self.check_feasible(nonneg, tol).is_ok()
    }

    /// Column-wise projection onto the feasible set. Returns the projected
    /// matrix and the number of columns that hit the degenerate fallback.
    pub fn project(&self, nonneg: bool) -> (Self, usize) {
        let mut out = self.data.clone();
        let mut fallbacks = 0;
        for mut col in out.column_iter_mut() {
            let p = project_feasible(&col.clone_owned(), nonneg);
            fallbacks += usize::from(p.degenerate);
            col.copy_from(&p.vector);
        }
        (Self { data: out }, fallbacks)
    }

    /// Reorders columns: output column `i` is input column `order[i]`.
    pub fn reorder(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.n())?;
        let cols: Vec<DVector<f64>> = order.iter().map(|&i| self.column(i)).collect();
        Self::from_columns(&cols)
    }

    /// CSV: a `d,n` header row, then `d` rows of `n` values, each printed
    /// with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.data, out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        Self::new(read_matrix_csv(input)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv output is ASCII")
    }
}

pub(crate) fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    w.write_record([m.nrows().to_string(), m.ncols().to_string()])?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| Error::Parse("missing d,n header".into()))??;
    if header.len() != 2 {
        return Err(Error::Parse("header must be `d,n`".into()));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Parse(format!("dimension {s:?}: {e}")))
    };
    let d = parse_dim(&header[0])?;
    let n = parse_dim(&header[1])?;
    let mut values = Vec::with_capacity(d * n);
    let mut rows = 0;
    for rec in records {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::DimensionMismatch {
                what: "csv row length",
                expected: n,
                found: rec.len(),
            });
        }
        for field in rec.iter() {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("value {field:?}: {e}")))?,
            );
        }
        rows += 1;
    }
    if rows != d {
        return Err(Error::DimensionMismatch {
            what: "csv row count",
            expected: d,
            found: rows,
        });
    }
    Ok(DMatrix::from_row_slice(d, n, &values))
}

/// Class-mean embeddings as the columns of a `d × k` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanMatrix {
    data: DMatrix<f64>,
}

impl MeanMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "mean matrix must be at least 1x1".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn d(&self) -> usize {
        self.data.nrows()
    }

    pub fn k(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, c: usize) -> DVector<f64> {
        self.data.column(c).into_owned()
    }

    /// `μ_G = (1/k) Σ_c μ_c`.
    pub fn global_mean(&self) -> DVector<f64> {
        self.data.column_mean()
    }

    pub fn gram(&self) -> GramMatrix {
        GramMatrix::from_factor(&self.data)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: &self.data * s,
        }
    }
}

/// A symmetric positive semidefinite matrix `VᵀV`.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    data: DMatrix<f64>,
}

impl GramMatrix {
    /// Validates symmetry (1e-12 relative) and positive semidefiniteness
    /// (smallest eigenvalue >= -1e-9 ‖G‖).
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if !data.is_square() || data.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "gram matrix must be square and non-empty".into(),
            ));
        }
        let scale = data.norm().max(f64::MIN_POSITIVE);
        let asym = (&data - data.transpose()).amax();
        if asym > 1e-12 * scale.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "gram matrix asymmetric by {asym}"
            )));
        }
        let sym = (&data + data.transpose()) * 0.5;
        let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
        if min_eig < -1e-9 * scale {
            return Err(Error::InvalidArgument(format!(
                "gram matrix not PSD: eigenvalue {min_eig}"
            )));
        }
        Ok(Self { data: sym })
    }

    /// `VᵀV`; each entry is an ordered dot product, so the result is exactly
    /// symmetric.
    pub fn from_factor(v: &DMatrix<f64>) -> Self {
        Self { data: v.tr_mul(v) }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }
}

/// Arithmetic mean of the columns of `h` in each class.
pub fn class_means(h: &EmbeddingMatrix, y: &LabelSet) -> Result<MeanMatrix> {
    if h.n() != y.n() {
        return Err(Error::DimensionMismatch {
            what: "labels vs embedding columns",
            expected: h.n(),
            found: y.n(),
        });
    }
    let mut sums = DMatrix::<f64>::zeros(h.d(), y.k());
    for (i, &c) in y.labels().iter().enumerate() {
        let mut dst = sums.column_mut(c);
        dst += h.as_matrix().column(i);
    }
    for (c, &nc) in y.counts().iter().enumerate() {
        let mut col = sums.column_mut(c);
        col /= nc as f64;
    }
    MeanMatrix::new(sums)
}

/// A k-orthogonal frame: the first `k` standard basis vectors of `R^d`.
pub fn make_of(k: usize, d: usize) -> Result<MeanMatrix> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if d < k {
        return Err(Error::InvalidArgument(format!(
            "OF needs d >= k (d = {d}, k = {k})"
        )));
    }
    MeanMatrix::new(DMatrix::identity(d, k))
}

/// A unit-norm simplex ETF with Gram `(k/(k-1))(I - 11ᵀ/k)`.
///
/// For `d >= k` this is a centered OF rescaled to unit columns. For
/// `d = k - 1` the same Gram is factored through its eigendecomposition so
/// the frame fits in the `(k-1)`-dimensional span it occupies.
pub fn make_etf(k: usize, d: usize) -> Result<MeanMatrix> {
    if k < 2 {
        return Err(Error::InvalidArgument("ETF needs k >= 2".into()));
    }
    if d + 1 < k {
        return Err(Error::InvalidArgument(format!(
            "a {k}-ETF spans {} dimensions; d = {d} is too small",
            k - 1
        )));
    }
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    if d >= k {
        return Ok(center_columns(&make_of(k, d)?).scaled(scale));
    }
    let centered = center_columns(&make_of(k, k)?).scaled(scale);
    let eig = SymmetricEigen::new(centered.gram().into_inner());
    // Keep the k-1 nonzero eigenpairs; the dropped one belongs to 1_k.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DMatrix::<f64>::zeros(d, k);
    for (row, &idx) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0).sqrt();
        for c in 0..k {
            out[(row, c)] = lambda * eig.eigenvectors[(c, idx)];
        }
    }
    MeanMatrix::new(out)
}

/// Subtracts the global mean `μ_G` from every column.
pub fn center_columns(v: &MeanMatrix) -> MeanMatrix {
    let mu = v.global_mean();
    let mut out = v.as_matrix().clone();
    for mut col in out.column_iter_mut() {
        col -= &mu;
    }
    MeanMatrix { data: out }
}

/// Result of projecting one vector onto a feasible set.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub vector: DVector<f64>,
    /// The input had no usable direction and the uniform vector was returned.
    pub degenerate: bool,
}

/// Euclidean projection onto the unit sphere, intersected with the
/// non-negative orthant when `nonneg` is set.
///
/// On the orthant-sphere the projection is `max(v, 0)` renormalized; when
/// nothing survives the clip (or `v = 0`) the uniform direction `1/√d` is
/// returned with `degenerate = true`.
pub fn project_feasible(v: &DVector<f64>, nonneg: bool) -> Projection {
    let mut x = v.clone();
    if nonneg {
        x.apply(|e| *e = e.max(0.0));
    }
    let norm = x.norm();
    if norm > 0.0 && norm.is_finite() {
        x /= norm;
        Projection {
            vector: x,
            degenerate: false,
        }
    } else {
        let d = v.len().max(1);
        Projection {
            vector: DVector::from_element(d, 1.0 / (d as f64).sqrt()),
            degenerate: true,
        }
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::read_csv(std::fs::File::open(path)?)
}
