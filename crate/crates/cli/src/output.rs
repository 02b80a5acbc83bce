//! CSV serialization with a `#`-prefixed metadata header.
//!
//! Floats are written with 17 significant digits, missing values as `NA`,
//! flags as `0`/`1`. The header holds nothing run-dependent besides the
//! seed, so identical inputs give byte-identical files.

use std::io::{self, Write};

use crate::config::{Config, SCHEMA_VERSION};
use crate::experiments::{BoundsRecord, CellInfo, Diagnosis, ScatterPoint, SweepRecord};

pub const NA: &str = "NA";

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), float)
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

fn opt_flag(b: Option<bool>) -> String {
    b.map_or_else(|| NA.to_string(), flag)
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| NA.to_string(), |v| v.to_string())
}

const CELL_COLUMNS: [&str; 9] = ["cell", "family", "size", "states", "sigma", "delta", "gamma", "graph_seed", "n"];

fn cell_fields(c: &CellInfo) -> Vec<String> {
    vec![
        c.cell.to_string(),
        c.family.to_string(),
        c.size.to_string(),
        c.states.to_string(),
        opt(c.sigma),
        opt_float(c.delta),
        float(c.gamma),
        opt(c.graph_seed),
        c.n.to_string(),
    ]
}

fn header(out: &mut dyn Write, kind: &str, cfg: &Config, extra: &[&str]) -> io::Result<()> {
    writeln!(out, "# opaug {kind}")?;
    writeln!(out, "# schema_version = {SCHEMA_VERSION}")?;
    writeln!(out, "# seed = {}", cfg.seed)?;
    for line in cfg.describe() {
        writeln!(out, "# {line}")?;
    }
    for line in extra {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn rows(out: &mut dyn Write, columns: &[&str], rows: impl Iterator<Item = Vec<String>>) -> io::Result<()> {
    writeln!(out, "{}", columns.join(","))?;
    for r in rows {
        debug_assert_eq!(r.len(), columns.len());
        writeln!(out, "{}", r.join(","))?;
    }
    Ok(())
}

const NORMALIZATION: &str = "normalization = mse / b_norm_sq, b_norm_sq = ||b||_M^2 = ||v||^2 in the evaluation norm";

pub const SWEEP_COLUMNS: [&str; 28] = [
    "realization",
    "stream_id",
    "epsilon_circ",
    "epsilon_tilde",
    "epsilon_star",
    "epsilon_star_se",
    "epsilon_boot",
    "b_norm_sq",
    "mse_naive",
    "mse_naive_se",
    "mse_tilde",
    "mse_circ",
    "mse_star",
    "mse_boot",
    "eta_tilde",
    "eta_circ",
    "eta_star",
    "eta_boot",
    "nmse_naive",
    "nmse_tilde",
    "basic_upper",
    "basic_upper_holds",
    "basic_positivity_holds",
    "spread_condition",
    "spread_applicable",
    "spread_upper",
    "bound_violation",
    "notes",
];

pub fn write_sweep(out: &mut dyn Write, cfg: &Config, records: &[SweepRecord]) -> io::Result<()> {
    header(out, "sweep", cfg, &[NORMALIZATION, "mse columns are exact quadratics fitted from per-trial sufficient statistics"])?;
    let columns: Vec<&str> = CELL_COLUMNS.iter().chain(SWEEP_COLUMNS.iter()).copied().collect();
    rows(
        out,
        &columns,
        records.iter().map(|r| {
            let mut f = cell_fields(&r.info);
            f.extend([
                r.realization.to_string(),
                r.stream_id.to_string(),
                opt_float(r.epsilon_circ),
                opt_float(r.epsilon_tilde),
                opt_float(r.epsilon_star),
                opt_float(r.epsilon_star_se),
                opt_float(r.epsilon_boot),
                float(r.b_norm_sq),
                float(r.mse_naive),
                float(r.mse_naive_se),
                opt_float(r.mse_tilde),
                opt_float(r.mse_circ),
                opt_float(r.mse_star),
                opt_float(r.mse_boot),
                opt_float(r.eta_tilde),
                opt_float(r.eta_circ),
                opt_float(r.eta_star),
                opt_float(r.eta_boot),
                opt_float(r.nmse_naive()),
                opt_float(r.nmse_tilde()),
                float(r.basic_upper),
                flag(r.basic_upper_holds),
                flag(r.basic_positivity_holds),
                opt_float(r.spread_condition),
                opt_flag(r.spread_applicable),
                opt_float(r.spread_upper),
                flag(r.bound_violation),
                if r.notes.is_empty() { NA.to_string() } else { r.notes.join(";") },
            ]);
            f
        }),
    )
}

pub fn write_scatter(out: &mut dyn Write, cfg: &Config, points: &[ScatterPoint]) -> io::Result<()> {
    header(out, "scatter", cfg, &[NORMALIZATION, "cells with zero naive error are omitted"])?;
    let columns: Vec<&str> = CELL_COLUMNS
        .iter()
        .copied()
        .chain(["realizations", "nmse_naive", "nmse_augmented", "below_diagonal"])
        .collect();
    rows(
        out,
        &columns,
        points.iter().map(|p| {
            let mut f = cell_fields(&p.info);
            f.extend([
                p.realizations.to_string(),
                float(p.nmse_naive),
                float(p.nmse_augmented),
                flag(p.below_diagonal()),
            ]);
            f
        }),
    )
}

pub fn write_bounds(out: &mut dyn Write, cfg: &Config, records: &[BoundsRecord]) -> io::Result<()> {
    header(out, "bounds", cfg, &["log base = natural (neumann_n_required uses C = 1, q = 2)"])?;
    let columns: Vec<&str> = CELL_COLUMNS
        .iter()
        .copied()
        .chain([
            "n_positive_threshold",
            "n_upper_threshold",
            "positivity_holds",
            "upper_holds",
            "upper_bound_basic",
            "p_max",
            "b_max",
            "spread_condition",
            "spread_applicable",
            "upper_bound_spread",
            "kappa",
            "neumann_n_required",
            "theta",
            "spectral_radius",
            "inf_norm_bound",
            "universal_bound",
            "violations",
        ])
        .collect();
    rows(
        out,
        &columns,
        records.iter().map(|r| {
            let mut f = cell_fields(&r.info);
            f.extend([
                float(r.basic.n_positive_threshold),
                float(r.basic.n_upper_threshold),
                flag(r.basic.positivity_holds),
                flag(r.basic.upper_holds),
                float(r.basic.upper_bound),
                opt_float(r.spread.map(|s| s.p_max)),
                opt_float(r.spread.map(|s| s.b_max)),
                opt_float(r.spread.map(|s| s.condition)),
                opt_flag(r.spread.map(|s| s.applicable)),
                opt_float(r.spread.map(|s| s.upper_bound)),
                r.kappa.to_string(),
                r.neumann_n_required.to_string(),
                opt_float(r.theta),
                float(r.spectral.spectral_radius),
                float(r.spectral.inf_norm_bound),
                float(r.spectral.universal_bound),
                if r.violations.is_empty() { NA.to_string() } else { r.violations.join(";") },
            ]);
            f
        }),
    )
}

/// `(key, value)` pairs of a diagnosis, in report order.
pub fn diagnosis_entries(d: &Diagnosis) -> Vec<(String, String)> {
    let b = &d.bounds;
    let mut e: Vec<(String, String)> = vec![
        ("family".into(), d.info.family.into()),
        ("states".into(), d.info.states.to_string()),
        ("gamma".into(), float(d.info.gamma)),
        ("n".into(), d.info.n.to_string()),
        ("norm".into(), d.norm.name().into()),
        ("b_norm_sq".into(), float(d.b_norm_sq)),
        ("g".into(), float(d.g)),
        ("h".into(), float(d.h)),
        ("t".into(), float(d.t)),
        ("epsilon_circ".into(), float(d.epsilon_circ)),
        ("epsilon_tilde".into(), opt_float(d.epsilon_tilde)),
        ("epsilon_star".into(), float(d.epsilon_star)),
        ("epsilon_star_method".into(), if d.epsilon_star_exact { "enumeration" } else { "monte_carlo" }.into()),
        ("epsilon_star_se".into(), float(d.epsilon_star_se)),
        ("mse_naive".into(), float(d.mse_naive)),
        ("mse_circ".into(), float(d.mse_circ)),
        ("mse_star".into(), float(d.mse_star)),
        ("eta_circ".into(), opt_float(d.eta_circ)),
        ("n_positive_threshold".into(), float(b.basic.n_positive_threshold)),
        ("n_upper_threshold".into(), float(b.basic.n_upper_threshold)),
        ("upper_bound_basic".into(), float(b.basic.upper_bound)),
        ("positivity_holds".into(), flag(b.basic.positivity_holds)),
        ("upper_holds".into(), flag(b.basic.upper_holds)),
        ("spread_condition".into(), opt_float(b.spread.map(|s| s.condition))),
        ("spread_applicable".into(), opt_flag(b.spread.map(|s| s.applicable))),
        ("upper_bound_spread".into(), opt_float(b.spread.map(|s| s.upper_bound))),
        ("kappa".into(), b.kappa.to_string()),
        ("neumann_n_required".into(), b.neumann_n_required.to_string()),
        ("spectral_radius".into(), float(b.spectral.spectral_radius)),
        ("inf_norm_bound".into(), float(b.spectral.inf_norm_bound)),
        ("universal_bound".into(), float(b.spectral.universal_bound)),
        ("consistent".into(), flag(d.consistent())),
        ("violations".into(), if b.violations.is_empty() { NA.into() } else { b.violations.join(";") }),
    ];
    if d.info.states <= 16 {
        for (name, m) in [("G", &d.g_matrix), ("H", &d.h_matrix)] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    e.push((format!("{name}[{i};{j}]"), float(m[(i, j)])));
                }
            }
        }
    }
    e
}

pub fn write_diagnosis(out: &mut dyn Write, cfg: &Config, d: &Diagnosis) -> io::Result<()> {
    header(out, "diagnose", cfg, &[])?;
    rows(out, &["key", "value"], diagnosis_entries(d).into_iter().map(|(k, v)| vec![k, v]))
}
