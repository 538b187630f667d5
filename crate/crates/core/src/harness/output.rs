use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{OutputFormat, RunConfig, SCHEMA_VERSION};
use super::experiment::{RunOutcome, SweepTable};
use crate::energy::EnergyReport;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::{field_names, ModelParams, PerturbationState};

pub const SERIES_HEADER: &str = "t,E,D,cumD,L_alpha,rho_min,rho_max,k_min,k_max,sup_a,sup_u,sup_h,sup_m,sup_eps";

/// Time series as CSV, 17 significant digits per value.
pub fn series_csv(series: &[EnergyReport]) -> String {
    let mut out = String::with_capacity(64 + series.len() * 14 * 24);
    out.push_str(SERIES_HEADER);
    out.push('\n');
    for r in series {
        let row = [
            r.t,
            r.energy,
            r.dissipation,
            r.cum_dissipation,
            r.lyapunov,
            r.rho_min,
            r.rho_max,
            r.k_min,
            r.k_max,
            r.sup.a,
            r.sup.u,
            r.sup.h,
            r.sup.m,
            r.sup.eps,
        ];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    create_dir(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::NonFinite(e.to_string()))?;
    write_file(&dir.join(name), format!("{text}\n").as_bytes())
}

/// `summary.json` plus the configured formats (`series.csv`, `final.ckpt`)
/// into `config.output.dir`.
pub fn write_outputs(outcome: &RunOutcome, config: &RunConfig) -> Result<()> {
    let dir = &config.output.dir;
    create_dir(dir)?;
    for format in &config.output.formats {
        match format {
            OutputFormat::Csv => write_file(&dir.join("series.csv"), series_csv(&outcome.series).as_bytes())?,
            OutputFormat::Checkpoint => {
                write_checkpoint(&dir.join("final.ckpt"), &outcome.final_state, &outcome.params)?
            }
        }
    }
    write_json(dir, "summary.json", &outcome.summary)
}

pub(crate) fn write_sweep(table: &SweepTable, dir: &Path) -> Result<()> {
    let mut csv = String::from("amplitude,observed_C,max_E_ratio,exit_status,completed,t_final\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for r in &table.rows {
        let status = serde_json::to_value(r.exit_status)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let _ = writeln!(
            csv,
            "{:.16e},{},{},{},{},{:.16e}",
            r.amplitude,
            opt(r.observed_c),
            opt(r.max_energy_ratio),
            status,
            r.completed,
            r.t_final
        );
    }
    create_dir(dir)?;
    write_file(&dir.join("sweep.csv"), csv.as_bytes())?;
    write_json(dir, "sweep.json", table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    schema_version: u32,
    dim: usize,
    n: usize,
    length: f64,
    params: ModelParams,
    t: f64,
    fields: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: PerturbationState,
    pub params: ModelParams,
}

/// One JSON header line, then every field in storage order as row-major
/// little-endian `f64`.
pub fn write_checkpoint(path: &Path, state: &PerturbationState, params: &ModelParams) -> Result<()> {
    let g = &state.grid;
    let header = CheckpointHeader {
        schema_version: SCHEMA_VERSION,
        dim: g.dim(),
        n: g.n(),
        length: g.length(),
        params: *params,
        t: state.t,
        fields: field_names(g.dim()).join(","),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::NonFinite(e.to_string()))?;
    bytes.push(b'\n');
    for f in state.fields() {
        for v in &f.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema_version {}", header.schema_version)));
    }
    let grid = Grid::new(header.dim, header.n, header.length).map_err(|e| bad(e.to_string()))?;
    if header.fields != field_names(header.dim).join(",") {
        return Err(bad(format!("unexpected field order {:?}", header.fields)));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let count = header.dim + 4;
    let expected = count * grid.len() * 8;
    if payload.len() != expected {
        return Err(bad(format!("expected {expected} data bytes, found {}", payload.len())));
    }
    let fields = payload
        .chunks_exact(grid.len() * 8)
        .map(|chunk| {
            ScalarField::new(
                chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            )
        })
        .collect();
    Ok(Checkpoint {
        state: PerturbationState::from_fields(&grid, header.t, fields)?,
        params: header.params,
    })
}
