use crate::error::{Error, Result};
use crate::labels::check_labels;

/// Column sums of a confusion matrix must be within this of one.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Cross-tabulation of true against predicted categories.
///
/// Stored in the published table layout: rows are predictions, columns are
/// true (reference) classes, so `cell(j, k) = n_{k→j}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowCounts {
    p: usize,
    cells: Vec<u64>,
}

impl FlowCounts {
    /// Builds from prediction-major rows: `rows[j][k] = n_{k→j}`.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let p = rows.len();
        if p == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        let mut cells = Vec::with_capacity(p * p);
        for row in rows {
            if row.len() != p {
                return Err(Error::DimensionMismatch { expected: p, found: row.len() });
            }
            cells.extend_from_slice(row);
        }
        Ok(Self { p, cells })
    }

    pub fn zeros(p: usize) -> Self {
        Self { p, cells: vec![0; p * p] }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// `n_{k→j}`: truly `k`, predicted `j`.
    pub fn flow(&self, true_k: usize, pred_j: usize) -> u64 {
        self.cells[pred_j * self.p + true_k]
    }

    pub(crate) fn add(&mut self, true_k: usize, pred_j: usize, count: u64) {
        self.cells[pred_j * self.p + true_k] += count;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.cells.chunks(self.p).map(<[u64]>::to_vec).collect()
    }

    /// `n_k`, the column sums.
    pub fn true_counts(&self) -> Vec<u64> {
        (0..self.p).map(|k| (0..self.p).map(|j| self.flow(k, j)).sum()).collect()
    }

    /// `ñ_j`, the row sums.
    pub fn predicted_counts(&self) -> Vec<u64> {
        (0..self.p).map(|j| (0..self.p).map(|k| self.flow(k, j)).sum()).collect()
    }

    /// `n_out,j = n_j − n_{j→j}`.
    pub fn out_flows(&self) -> Vec<u64> {
        self.true_counts().iter().enumerate().map(|(j, n)| n - self.flow(j, j)).collect()
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    /// Expands the table back into `(true, predicted)` label pairs, ordered by
    /// true class then predicted class.
    pub fn to_label_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.total() as usize;
        let mut t = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for k in 0..self.p {
            for j in 0..self.p {
                let c = self.flow(k, j) as usize;
                t.extend(std::iter::repeat_n(k, c));
                q.extend(std::iter::repeat_n(j, c));
            }
        }
        (t, q)
    }
}

/// Exact cross-tabulation of two label vectors over `p` categories.
pub fn flows_from_labels(true_labels: &[usize], pred_labels: &[usize], p: usize) -> Result<FlowCounts> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::LengthMismatch { left: true_labels.len(), right: pred_labels.len() });
    }
    check_labels(true_labels, p)?;
    check_labels(pred_labels, p)?;
    let mut flows = FlowCounts::zeros(p);
    for (&k, &j) in true_labels.iter().zip(pred_labels) {
        flows.add(k, j, 1);
    }
    Ok(flows)
}

/// Column-stochastic matrix with `C[j][k] = Pr(pred j | true k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    p: usize,
    data: Vec<f64>,
}

impl ConfusionMatrix {
    /// Validates nonnegativity and unit column sums (within 1e-9).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.len();
        if p == 0 {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        let mut data = Vec::with_capacity(p * p);
        for row in rows {
            if row.len() != p {
                return Err(Error::DimensionMismatch { expected: p, found: row.len() });
            }
            data.extend_from_slice(row);
        }
        let c = Self { p, data };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        for k in 0..self.p {
            let mut sum = 0.0;
            for j in 0..self.p {
                let v = self.get(j, k);
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::NotColumnStochastic { column: k, sum: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotColumnStochastic { column: k, sum });
            }
        }
        Ok(())
    }

    pub fn identity(p: usize) -> Self {
        let mut data = vec![0.0; p * p];
        for j in 0..p {
            data[j * p + j] = 1.0;
        }
        Self { p, data }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.p + k]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.p).map(<[f64]>::to_vec).collect()
    }

    /// Column `k`: the distribution of predictions for true class `k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.p).map(|j| self.get(j, k)).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.p {
            return Err(Error::DimensionMismatch { expected: self.p, found: v.len() });
        }
        Ok((0..self.p).map(|j| (0..self.p).map(|k| self.get(j, k) * v[k]).sum()).collect())
    }
}

/// `C[j][k] = n_{k→j} / n_k`.
pub fn confusion_from_flows(flows: &FlowCounts) -> Result<ConfusionMatrix> {
    let p = flows.dim();
    let n = flows.true_counts();
    if let Some(k) = n.iter().position(|&c| c == 0) {
        return Err(Error::EmptyTrueClass(k));
    }
    let data = (0..p)
        .flat_map(|j| {
            let n = &n;
            (0..p).map(move |k| flows.flow(k, j) as f64 / n[k] as f64)
        })
        .collect();
    Ok(ConfusionMatrix { p, data })
}

/// Per-row accuracy `n_{j→j} / ñ_j`, as a fraction.
pub fn precision_per_predicted_class(flows: &FlowCounts) -> Result<Vec<f64>> {
    flows
        .predicted_counts()
        .iter()
        .enumerate()
        .map(|(j, &nt)| {
            if nt == 0 {
                Err(Error::EmptyPredictedClass(j))
            } else {
                Ok(flows.flow(j, j) as f64 / nt as f64)
            }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Published NC voter confusion table (rows: predicted, columns: reference;
    /// order Asian, Black, Hispanic, Others, White).
    pub(crate) fn nc_table() -> FlowCounts {
        FlowCounts::from_rows(&[
            vec![17907, 448, 380, 6298, 1815],
            vec![1836, 280480, 3983, 11346, 82036],
            vec![1087, 2765, 74506, 6997, 15313],
            vec![4089, 10060, 2496, 7327, 12737],
            vec![6533, 140072, 12409, 22671, 1126267],
        ])
        .unwrap()
    }

    #[test]
    fn identical_labels_give_diagonal() {
        let l = [0, 1, 2, 2, 1, 0, 0];
        let f = flows_from_labels(&l, &l, 3).unwrap();
        assert_eq!(f.predicted_counts(), f.true_counts());
        for k in 0..3 {
            for j in 0..3 {
                if j != k {
                    assert_eq!(f.flow(k, j), 0);
                }
            }
        }
    }

    #[test]
    fn one_swap() {
        let f = flows_from_labels(&[0, 0, 1, 1], &[1, 0, 1, 1], 2).unwrap();
        assert_eq!(f.flow(0, 1), 1);
        assert_eq!(f.out_flows(), vec![1, 0]);
        assert!(matches!(flows_from_labels(&[0], &[0, 1], 2), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn nc_table_round_trips_through_labels() {
        let table = nc_table();
        let (t, q) = table.to_label_pairs();
        let f = flows_from_labels(&t, &q, 5).unwrap();
        assert_eq!(f.flow(1, 4), 140072);
        assert_eq!(f.true_counts(), vec![31452, 433825, 93774, 54639, 1238168]);
        assert_eq!(f.predicted_counts(), vec![26848, 379681, 100668, 36709, 1307952]);
        assert_eq!(f.total(), 1851858);
    }

    #[test]
    fn nc_confusion_and_precision() {
        let f = nc_table();
        let c = confusion_from_flows(&f).unwrap();
        assert!((c.get(4, 4) - 1126267.0 / 1238168.0).abs() < 1e-15);
        assert!((c.get(4, 4) - 0.9096).abs() < 1e-4);
        assert!((c.get(1, 1) - 0.6465).abs() < 1e-4);
        let prec: Vec<f64> = precision_per_predicted_class(&f).unwrap().iter().map(|x| x * 100.0).collect();
        for (got, want) in prec.iter().zip([66.7, 73.9, 74.0, 20.0, 86.1]) {
            assert!((got - want).abs() < 0.05, "{got} vs {want}");
        }
    }

    #[test]
    fn confusion_examples() {
        let f = FlowCounts::from_rows(&[vec![90, 10], vec![10, 90]]).unwrap();
        let c = confusion_from_flows(&f).unwrap();
        assert_eq!(c.rows(), vec![vec![0.9, 0.1], vec![0.1, 0.9]]);

        let diag = FlowCounts::from_rows(&[vec![3, 0], vec![0, 7]]).unwrap();
        assert_eq!(confusion_from_flows(&diag).unwrap(), ConfusionMatrix::identity(2));

        let empty = FlowCounts::from_rows(&[vec![3, 0], vec![0, 0]]).unwrap();
        assert_eq!(confusion_from_flows(&empty).unwrap_err(), Error::EmptyTrueClass(1));
    }

    #[test]
    fn precision_examples() {
        let id = FlowCounts::from_rows(&[vec![4, 0], vec![0, 9]]).unwrap();
        assert_eq!(precision_per_predicted_class(&id).unwrap(), vec![1.0, 1.0]);
        let uni = FlowCounts::from_rows(&[vec![5, 5], vec![5, 5]]).unwrap();
        assert_eq!(precision_per_predicted_class(&uni).unwrap(), vec![0.5, 0.5]);
        let hole = FlowCounts::from_rows(&[vec![5, 5], vec![0, 0]]).unwrap();
        assert_eq!(precision_per_predicted_class(&hole).unwrap_err(), Error::EmptyPredictedClass(1));
    }

    #[test]
    fn confusion_construction_checks_columns() {
        assert!(ConfusionMatrix::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.9]]).is_err());
        assert!(ConfusionMatrix::from_rows(&[vec![1.1, 0.0], vec![-0.1, 1.0]]).is_err());
        assert!(ConfusionMatrix::from_rows(&[vec![0.9, 0.3], vec![0.1, 0.7]]).is_ok());
    }
}
