//! Plot-ready outputs: tidy CSV, gnuplot matrices and an SVG heatmap.

use crate::records::{write_csv, ResultRecord};
use crate::CliError;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub row: usize,
    pub col: usize,
    pub grid_index: usize,
    /// Stability of the all-grass equilibrium of the mean-field ODE.
    pub meanfield_verdict: String,
    /// `mu nu < omega (beta - nu)`.
    pub survival_condition: bool,
    pub survival_fraction: f64,
    pub replicas: usize,
    pub horizon: f64,
}

/// Two-parameter grid of cells, rows indexed by the first varying axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub row_name: String,
    pub row_values: Vec<f64>,
    pub col_name: String,
    pub col_values: Vec<f64>,
    pub cells: Vec<PhaseCell>,
}

impl PhaseDiagram {
    pub fn cell(&self, row: usize, col: usize) -> &PhaseCell {
        &self.cells[row * self.col_values.len() + col]
    }
}

/// gnuplot `nonuniform matrix` text: first line `N x_1 .. x_N`, then one
/// line `y z_1 .. z_N` per row.
pub fn gnuplot_matrix(pd: &PhaseDiagram) -> String {
    let mut s = String::new();
    write!(s, "{}", pd.col_values.len()).unwrap();
    for c in &pd.col_values {
        write!(s, " {c}").unwrap();
    }
    s.push('\n');
    for (i, r) in pd.row_values.iter().enumerate() {
        write!(s, "{r}").unwrap();
        for j in 0..pd.col_values.len() {
            write!(s, " {}", pd.cell(i, j).survival_fraction).unwrap();
        }
        s.push('\n');
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Heatmap of survival fractions; cells where the mean-field survival
/// condition holds carry a dot.
pub fn svg_heatmap(pd: &PhaseDiagram) -> String {
    let (cw, ch, left, top) = (24.0, 24.0, 70.0, 20.0);
    let (nr, nc) = (pd.row_values.len(), pd.col_values.len());
    let width = left + cw * nc as f64 + 20.0;
    let height = top + ch * nr as f64 + 50.0;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#).unwrap();
    for i in 0..nr {
        for j in 0..nc {
            let c = pd.cell(i, j);
            let v = c.survival_fraction.clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let (x, y) = (left + cw * j as f64, top + ch * (nr - 1 - i) as f64);
            writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="rgb({shade},{shade},255)"><title>{}={} {}={} fraction={v}</title></rect>"#,
                esc(&pd.row_name),
                pd.row_values[i],
                esc(&pd.col_name),
                pd.col_values[j]
            )
            .unwrap();
            if c.survival_condition {
                writeln!(
                    s,
                    r#"<circle cx="{}" cy="{}" r="2" fill="black"/>"#,
                    x + cw / 2.0,
                    y + ch / 2.0
                )
                .unwrap();
            }
        }
    }
    let bottom = top + ch * nr as f64;
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + cw * nc as f64 / 2.0,
        bottom + 35.0,
        esc(&pd.col_name)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
        top + ch * nr as f64 / 2.0,
        top + ch * nr as f64 / 2.0,
        esc(&pd.row_name)
    )
    .unwrap();
    for (j, v) in pd.col_values.iter().enumerate() {
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.3}</text>"#,
            left + cw * (j as f64 + 0.5),
            bottom + 14.0,
            v
        )
        .unwrap();
    }
    for (i, v) in pd.row_values.iter().enumerate() {
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            left - 4.0,
            top + ch * (nr - 1 - i) as f64 + ch / 2.0 + 3.0,
            v
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `records.csv` and, for a phase diagram, `phase_cells.csv`,
/// `phase_matrix.dat` and `phase.svg`. Returns the files written.
pub fn emit_plot_data(
    records: &[ResultRecord],
    phase: Option<&PhaseDiagram>,
    dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let p = dir.join("records.csv");
    write_csv(&p, records)?;
    written.push(p);
    if let Some(pd) = phase {
        let p = dir.join("phase_cells.csv");
        let mut w = csv::Writer::from_path(&p).map_err(|e| CliError::Io(e.to_string()))?;
        w.write_record([
            pd.row_name.as_str(),
            pd.col_name.as_str(),
            "grid_index",
            "meanfield_verdict",
            "survival_condition",
            "survival_fraction",
            "replicas",
            "horizon",
        ])
        .map_err(|e| CliError::Io(e.to_string()))?;
        for c in &pd.cells {
            w.write_record([
                pd.row_values[c.row].to_string(),
                pd.col_values[c.col].to_string(),
                c.grid_index.to_string(),
                c.meanfield_verdict.clone(),
                c.survival_condition.to_string(),
                c.survival_fraction.to_string(),
                c.replicas.to_string(),
                c.horizon.to_string(),
            ])
            .map_err(|e| CliError::Io(e.to_string()))?;
        }
        w.flush()?;
        written.push(p);
        let p = dir.join("phase_matrix.dat");
        fs::write(&p, gnuplot_matrix(pd))?;
        written.push(p);
        let p = dir.join("phase.svg");
        fs::write(&p, svg_heatmap(pd))?;
        written.push(p);
    }
    Ok(written)
}
