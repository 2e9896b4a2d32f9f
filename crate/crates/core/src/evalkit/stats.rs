//! Stuart-Maxwell test of marginal homogeneity for two classifiers scored
//! on the same images.

use std::io::Read;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::Class;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-12;

/// Truth plus the predictions of classifiers A and B, aligned per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedPredictions {
    truth: Vec<Class>,
    a: Vec<Class>,
    b: Vec<Class>,
}

impl PairedPredictions {
    pub fn new(truth: Vec<Class>, a: Vec<Class>, b: Vec<Class>) -> Result<Self> {
        if truth.len() != a.len() || a.len() != b.len() {
            return Err(Error::Precondition(format!(
                "paired predictions differ in length: truth {}, A {}, B {}",
                truth.len(),
                a.len(),
                b.len()
            )));
        }
        Ok(PairedPredictions { truth, a, b })
    }

    /// Joins two prediction CSV files (`image_id,truth,predicted`) on image id.
    pub fn join_csv(a: impl Read, b: impl Read) -> Result<Self> {
        let a = read_predictions(a)?;
        let b: std::collections::HashMap<u64, (Class, Class)> = read_predictions(b)?
            .into_iter()
            .map(|(id, t, p)| (id, (t, p)))
            .collect();
        if a.len() != b.len() {
            return Err(Error::Precondition(format!(
                "prediction files cover {} and {} images",
                a.len(),
                b.len()
            )));
        }
        let mut out = PairedPredictions::default();
        for (id, truth, pa) in a {
            let &(tb, pb) = b
                .get(&id)
                .ok_or_else(|| Error::Precondition(format!("image {id} missing from second file")))?;
            if tb != truth {
                return Err(Error::Precondition(format!(
                    "image {id} has truth {truth} in one file and {tb} in the other"
                )));
            }
            out.truth.push(truth);
            out.a.push(pa);
            out.b.push(pb);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn truth(&self) -> &[Class] {
        &self.truth
    }

    /// Rows are A's predictions, columns B's.
    pub fn agreement_table(&self) -> [[u64; 3]; 3] {
        let mut n = [[0u64; 3]; 3];
        for (a, b) in self.a.iter().zip(&self.b) {
            n[a.index()][b.index()] += 1;
        }
        n
    }
}

#[derive(Debug, serde::Deserialize)]
struct PredictionRow {
    image_id: u64,
    truth: String,
    predicted: String,
}

/// Reads a prediction file with header `image_id,truth,predicted`.
pub fn read_predictions(r: impl Read) -> Result<Vec<(u64, Class, Class)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in rdr.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| Error::format("predictions", e))?;
        if !seen.insert(row.image_id) {
            return Err(Error::format(
                "predictions",
                format!("duplicate image_id {}", row.image_id),
            ));
        }
        out.push((row.image_id, row.truth.parse()?, row.predicted.parse()?));
    }
    Ok(out)
}

/// Writes rows in the format [`read_predictions`] accepts.
pub fn write_predictions(rows: &[(u64, Class, Class)], mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "image_id,truth,predicted")?;
    for (id, truth, predicted) in rows {
        writeln!(w, "{id},{truth},{predicted}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StuartMaxwell {
    pub statistic: f64,
    /// 2, or 1 when all disagreement sits in a single pair of categories.
    pub df: usize,
    pub p_value: f64,
}

/// Chi-square survival function.
pub fn chi_square_sf(x: f64, df: usize) -> Result<f64> {
    if x <= 0.0 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(dist.sf(x))
}

/// Runs the test on a 3x3 agreement table (rows A, columns B).
///
/// The marginal differences of the first two categories are tested with
/// their covariance matrix. When that matrix is singular the quadratic form
/// uses its pseudo-inverse and the degrees of freedom drop to its rank.
pub fn stuart_maxwell_table(n: &[[u64; 3]; 3]) -> Result<StuartMaxwell> {
    let f = |i: usize, j: usize| n[i][j] as f64;
    let row = |i: usize| (0..3).map(|j| f(i, j)).sum::<f64>();
    let col = |i: usize| (0..3).map(|j| f(j, i)).sum::<f64>();
    let discordant: u64 = (0..3)
        .flat_map(|i| (0..3).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| n[i][j])
        .sum();
    if discordant == 0 {
        return Err(Error::Precondition(
            "the classifiers agree on every image; the test needs at least one discordant pair".into(),
        ));
    }

    let d = [row(0) - col(0), row(1) - col(1)];
    let s11 = row(0) + col(0) - 2.0 * f(0, 0);
    let s22 = row(1) + col(1) - 2.0 * f(1, 1);
    let s12 = -(f(0, 1) + f(1, 0));

    // Symmetric 2x2 eigen-decomposition.
    let half_tr = 0.5 * (s11 + s22);
    let disc = (0.25 * (s11 - s22).powi(2) + s12 * s12).sqrt();
    let lambdas = [half_tr + disc, half_tr - disc];
    let vectors = if s12.abs() > 0.0 {
        lambdas.map(|l| {
            let v = [s12, l - s11];
            let norm = v[0].hypot(v[1]);
            [v[0] / norm, v[1] / norm]
        })
    } else if s11 >= s22 {
        [[1.0, 0.0], [0.0, 1.0]]
    } else {
        [[0.0, 1.0], [1.0, 0.0]]
    };
    let top = lambdas[0].max(0.0);
    let mut statistic = 0.0;
    let mut df = 0;
    for (l, v) in lambdas.iter().zip(vectors) {
        if *l > RANK_TOL * top && *l > 0.0 {
            let proj = v[0] * d[0] + v[1] * d[1];
            statistic += proj * proj / l;
            df += 1;
        }
    }
    if df == 0 {
        return Err(Error::Numeric("covariance of marginal differences vanished".into()));
    }
    // Rounding can leave a tiny positive value for an exactly symmetric table.
    if d == [0.0, 0.0] {
        statistic = 0.0;
    }
    Ok(StuartMaxwell {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df)?,
    })
}

pub fn stuart_maxwell(p: &PairedPredictions) -> Result<StuartMaxwell> {
    stuart_maxwell_table(&p.agreement_table())
}
