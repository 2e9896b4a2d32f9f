//! Confusion matrices and accuracy reports.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::Class;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Class, Class)>) -> Self {
        let mut m = ConfusionMatrix::default();
        for (truth, pred) in pairs {
            m.add(truth, pred);
        }
        m
    }

    pub fn add(&mut self, truth: Class, pred: Class) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, truth: Class) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    /// Fraction of `truth` images classified correctly; `None` without support.
    pub fn class_accuracy(&self, truth: Class) -> Option<f64> {
        let n = self.row_total(truth);
        (n > 0).then(|| self.counts[truth.index()][truth.index()] as f64 / n as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.correct() as f64 / n as f64)
    }
}

/// Per-class and total accuracy for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub confusion: ConfusionMatrix,
    pub per_class: [Option<f64>; 3],
    pub total: f64,
    pub support: [u64; 3],
}

pub fn evaluate(pairs: impl IntoIterator<Item = (Class, Class)>) -> Result<AccuracyReport> {
    let confusion = ConfusionMatrix::from_pairs(pairs);
    let total = confusion
        .accuracy()
        .ok_or_else(|| Error::Empty("no predictions to evaluate".into()))?;
    Ok(AccuracyReport {
        per_class: Class::ALL.map(|c| confusion.class_accuracy(c)),
        support: Class::ALL.map(|c| confusion.row_total(c)),
        confusion,
        total,
    })
}

impl AccuracyReport {
    /// Rows `class,support,correct,accuracy` plus a `total` row.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "class,support,correct,accuracy")?;
        for c in Class::ALL {
            let i = c.index();
            let acc = self.per_class[i].map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(w, "{c},{},{},{acc}", self.support[i], self.confusion.counts[i][i])?;
        }
        writeln!(
            w,
            "total,{},{},{:.6}",
            self.confusion.total(),
            self.confusion.correct(),
            self.total
        )
    }

    /// Confusion matrix as CSV, true classes down, predictions across.
    pub fn write_confusion_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "true\\pred,GAN,Graphics,Real")?;
        for c in Class::ALL {
            let row = self.confusion.counts[c.index()];
            writeln!(w, "{c},{},{},{}", row[0], row[1], row[2])?;
        }
        Ok(())
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}", "true\\pred", "GAN", "Graphics", "Real");
        for c in Class::ALL {
            let row = self.confusion.counts[c.index()];
            let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}", c.name(), row[0], row[1], row[2]);
        }
        s.push('\n');
        for c in Class::ALL {
            let acc = match self.per_class[c.index()] {
                Some(a) => format!("{:.2}%", 100.0 * a),
                None => "n/a".into(),
            };
            let _ = writeln!(s, "{:<10}{acc:>10}", c.name());
        }
        let _ = writeln!(s, "{:<10}{:>9.2}%", "total", 100.0 * self.total);
        s
    }
}
