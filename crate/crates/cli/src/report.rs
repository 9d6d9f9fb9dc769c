//! Report formats: JSON for single evaluations, CSV plus aligned text for sweeps.

use serde::Serialize;

use lsvt::datagen::Split;
use lsvt::network::Theta;
use lsvt::svt::SvtConfig;
use lsvt::training::EvalReport;

#[derive(Debug, Serialize)]
pub struct Quantiles {
    pub min: f64,
    pub p05: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p95: f64,
    pub max: f64,
}

impl Quantiles {
    fn of(rep: &EvalReport) -> Self {
        Self {
            min: rep.quantile(0.0),
            p05: rep.quantile(0.05),
            p25: rep.quantile(0.25),
            median: rep.quantile(0.5),
            p75: rep.quantile(0.75),
            p95: rep.quantile(0.95),
            max: rep.quantile(1.0),
        }
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SolverParams {
    Svt {
        tau: f64,
        delta: f64,
        iterations: usize,
    },
    Lsvt {
        layers: usize,
        hidden_layers: usize,
        taus: Vec<f64>,
        deltas: Vec<f64>,
    },
}

#[derive(Debug, Serialize)]
pub struct ReportProvenance {
    pub dataset_sha256: String,
    pub checkpoint_sha256: Option<String>,
    pub version: &'static str,
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub solver: SolverParams,
    pub split: &'static str,
    pub count: usize,
    /// Mean per-entry squared error over finite reconstructions.
    pub mse: Option<f64>,
    /// Mean `‖X - X̂‖_F²` over finite reconstructions.
    pub mean_sq_error: Option<f64>,
    /// Reconstructions that failed or were not finite (excluded from the means).
    pub non_finite: usize,
    pub quantiles: Option<Quantiles>,
    pub provenance: ReportProvenance,
    #[serde(skip)]
    pub per_instance: Vec<f64>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl EvalOutput {
    fn new(solver: SolverParams, split: Split, rep: &EvalReport, provenance: ReportProvenance) -> Self {
        Self {
            solver,
            split: split.name(),
            count: rep.count,
            mse: finite(rep.mse),
            mean_sq_error: finite(rep.mean_sq_error),
            non_finite: rep.non_finite,
            quantiles: finite(rep.mse).map(|_| Quantiles::of(rep)),
            provenance,
            per_instance: rep.per_instance.clone(),
        }
    }

    pub fn svt(cfg: SvtConfig, split: Split, rep: &EvalReport, dataset_sha: &str) -> Self {
        Self::new(
            SolverParams::Svt {
                tau: cfg.tau,
                delta: cfg.delta,
                iterations: cfg.iterations,
            },
            split,
            rep,
            ReportProvenance {
                dataset_sha256: dataset_sha.into(),
                checkpoint_sha256: None,
                version: crate::VERSION,
            },
        )
    }

    pub fn lsvt(theta: &Theta, split: Split, rep: &EvalReport, dataset_sha: &str, ckpt_sha: &str) -> Self {
        Self::new(
            SolverParams::Lsvt {
                layers: theta.hidden_layers() + 1,
                hidden_layers: theta.hidden_layers(),
                taus: theta.taus.clone(),
                deltas: theta.deltas.clone(),
            },
            split,
            rep,
            ReportProvenance {
                dataset_sha256: dataset_sha.into(),
                checkpoint_sha256: Some(ckpt_sha.into()),
                version: crate::VERSION,
            },
        )
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.10e}")
    } else {
        String::new()
    }
}

pub fn per_instance_csv(values: &[f64]) -> String {
    let mut out = String::from("index,mse\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", num(*v)));
    }
    out
}

/// Summary of one solver on one test split.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub mse: f64,
    pub non_finite: usize,
}

impl From<&EvalReport> for Cell {
    fn from(rep: &EvalReport) -> Self {
        Self {
            mse: rep.mse,
            non_finite: rep.non_finite,
        }
    }
}

impl Cell {
    /// Training diverged, so nothing was reconstructed.
    pub fn diverged(count: usize) -> Self {
        Self {
            mse: f64::NAN,
            non_finite: count,
        }
    }

    fn show(&self) -> String {
        let base = if self.mse.is_finite() {
            format!("{:.4}", self.mse)
        } else {
            "diverged".into()
        };
        if self.non_finite > 0 && self.mse.is_finite() {
            format!("{base} ({} NaN)", self.non_finite)
        } else {
            base
        }
    }
}

/// LSVT beats SVT: finite everywhere and lower mean error (an SVT that
/// diverged is beaten by any fully finite LSVT).
pub fn lsvt_wins(svt: &Cell, lsvt: &Cell) -> bool {
    lsvt.non_finite == 0 && lsvt.mse.is_finite() && (!svt.mse.is_finite() || svt.non_finite > 0 || lsvt.mse < svt.mse)
}

pub struct CompareRow {
    pub d: usize,
    pub r: usize,
    pub m: usize,
    /// `(T, svt, lsvt)` per swept layer count.
    pub cells: Vec<(usize, Cell, Cell)>,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("d,r,m");
    if let Some(first) = rows.first() {
        for (t, _, _) in &first.cells {
            out.push_str(&format!(",svt_T{t},lsvt_T{t}"));
        }
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{},{}", row.d, row.r, row.m));
        for (_, svt, lsvt) in &row.cells {
            out.push_str(&format!(",{},{}", num(svt.mse), num(lsvt.mse)));
        }
        out.push('\n');
    }
    out
}

fn render(header: &[String], body: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n"));
    for row in body {
        out.push_str(&line(row));
    }
    out
}

pub fn compare_text(rows: &[CompareRow]) -> String {
    let mut header = vec!["rank".to_string()];
    if let Some(first) = rows.first() {
        for (t, _, _) in &first.cells {
            header.push(format!("SVT T={t}"));
            header.push(format!("LSVT T={t}"));
        }
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let mut cells = vec![format!("r={} (d={}, m={})", row.r, row.d, row.m)];
            for (_, svt, lsvt) in &row.cells {
                cells.push(svt.show());
                let mark = if lsvt_wins(svt, lsvt) { "*" } else { "" };
                cells.push(format!("{}{mark}", lsvt.show()));
            }
            cells
        })
        .collect();
    let mut out = render(&header, &body);
    out.push_str("* LSVT below SVT\n");
    out
}

pub struct GridRow {
    pub tau: f64,
    pub delta: f64,
    pub svt: Cell,
    pub lsvt: Cell,
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("tau,delta,svt_mse,lsvt_mse,svt_non_finite,lsvt_non_finite,lsvt_better\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.tau,
            row.delta,
            num(row.svt.mse),
            num(row.lsvt.mse),
            row.svt.non_finite,
            row.lsvt.non_finite,
            if lsvt_wins(&row.svt, &row.lsvt) { "pass" } else { "fail" }
        ));
    }
    out
}

pub fn grid_text(d: usize, r: usize, m: usize, t: usize, rows: &[GridRow]) -> String {
    let header: Vec<String> = ["tau", "delta", "SVT", "LSVT", "LSVT < SVT"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                format!("{}", row.tau),
                format!("{}", row.delta),
                row.svt.show(),
                row.lsvt.show(),
                if lsvt_wins(&row.svt, &row.lsvt) { "pass" } else { "fail" }.into(),
            ]
        })
        .collect();
    format!("d={d} r={r} m={m} T={t}\n{}", render(&header, &body))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(mse: f64, non_finite: usize) -> Cell {
        Cell { mse, non_finite }
    }

    #[test]
    fn winner_rules() {
        assert!(lsvt_wins(&cell(1.0, 0), &cell(0.5, 0)));
        assert!(!lsvt_wins(&cell(0.5, 0), &cell(1.0, 0)));
        assert!(lsvt_wins(&cell(f64::NAN, 10), &cell(3.0, 0)));
        assert!(!lsvt_wins(&cell(1.0, 0), &Cell::diverged(10)));
        assert!(!lsvt_wins(&cell(1.0, 0), &cell(0.5, 1)));
    }

    #[test]
    fn compare_layout() {
        let rows = vec![CompareRow {
            d: 10,
            r: 1,
            m: 57,
            cells: vec![(2, cell(2.3, 0), cell(0.1, 0)), (3, cell(1.1, 0), cell(0.05, 0))],
        }];
        let csv = compare_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "d,r,m,svt_T2,lsvt_T2,svt_T3,lsvt_T3");
        let text = compare_text(&rows);
        assert!(text.contains("SVT T=2"));
        assert!(text.contains("0.1000*"));
    }

    #[test]
    fn empty_cells_for_nan() {
        assert_eq!(per_instance_csv(&[1.0, f64::NAN]), "index,mse\n0,1.0000000000e0\n1,\n");
    }
}
