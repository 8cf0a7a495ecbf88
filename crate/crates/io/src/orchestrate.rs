//! Executes every block of a configuration and writes its outputs.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ccdmr_core::imaging::ScanMap;
use ccdmr_core::record::RunRecord;
use ccdmr_core::sequence::protocols::run_protocol;
use serde_json::json;

use crate::config::{to_toml, validate, ConfigErrors, ExperimentConfig};
use crate::manifest::{sha256_hex, BlockEntry, FileEntry, RunManifest, MANIFEST_FILE, SCHEMA_VERSION};
use crate::Error;

/// Output directory used when neither `--out` nor the config names one.
pub const OUT_ENV: &str = "CCDMR_OUT";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Also write 0–255 matrices next to every map.
    pub png_data: bool,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<FileEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<String> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(name.to_string())
    }

    fn put_json(&mut self, name: &str, v: &serde_json::Value) -> std::io::Result<String> {
        let mut s = serde_json::to_string_pretty(v).map_err(std::io::Error::other)?;
        s.push('\n');
        self.put(name, s.as_bytes())
    }
}

fn map_sidecar(m: &ScanMap) -> serde_json::Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "name": m.name,
        "unit": m.unit.label(),
        "x_axis": m.x_axis,
        "y_axis": m.y_axis,
        "shape": [m.y.len(), m.x.len()],
        "metadata": m.metadata,
    })
}

fn write_block(w: &mut Writer, name: &str, index: usize, rec: &RunRecord, png: bool) -> std::io::Result<Vec<String>> {
    let mut out = vec![w.put(&format!("{name}.csv"), rec.to_csv().as_bytes())?];
    out.push(w.put_json(
        &format!("{name}.json"),
        &json!({ "schema_version": SCHEMA_VERSION, "block": index, "name": name, "record": rec }),
    )?);
    if !rec.fits.is_empty() {
        out.push(w.put_json(
            &format!("{name}_fit.json"),
            &json!({ "schema_version": SCHEMA_VERSION, "block": index, "fits": rec.fits, "derived": rec.derived }),
        )?);
    }
    for m in &rec.maps {
        let stem = if m.name.starts_with(name) { m.name.clone() } else { format!("{name}_{}", m.name) };
        out.push(w.put(&format!("{stem}.csv"), m.to_csv().as_bytes())?);
        out.push(w.put_json(&format!("{stem}.json"), &map_sidecar(m))?);
        if png {
            out.push(w.put(&format!("{stem}_png.csv"), m.png_data_csv().as_bytes())?);
        }
    }
    for (i, tr) in &rec.traces {
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).map_err(std::io::Error::other)?;
        out.push(w.put(&format!("{name}_trace_{i}.csv"), &buf)?);
    }
    Ok(out)
}

/// Check `cfg`, run each block and write CSV/JSON outputs plus
/// `manifest.json` into `opts.out_dir`. A block that fails is recorded in the
/// manifest and the remaining blocks still run.
pub fn orchestrate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest, Error> {
    let fatal: Vec<_> = validate(cfg).into_iter().filter(|d| !d.path.ends_with(".protocol")).collect();
    if !fatal.is_empty() {
        return Err(Error::Config(ConfigErrors(fatal)));
    }
    let world = cfg.world()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let canonical = to_toml(cfg);
    let mut w = Writer {
        dir: &opts.out_dir,
        files: Vec::new(),
    };
    w.put("config.toml", canonical.as_bytes())?;
    let mut blocks = Vec::new();
    for (i, b) in cfg.blocks.iter().enumerate() {
        let name = cfg.block_name(i);
        let t = Instant::now();
        let result = run_protocol(&b.protocol, &world, cfg.seed, i as u64);
        let (ok, outputs, error) = match result {
            Ok(rec) => (true, write_block(&mut w, &name, i, &rec, opts.png_data)?, None),
            Err(e) => (false, Vec::new(), Some(e.to_string())),
        };
        blocks.push(BlockEntry {
            index: i,
            name,
            kind: b.protocol.kind().name().to_string(),
            ok,
            outputs,
            error,
            wall_time_s: t.elapsed().as_secs_f64(),
        });
    }
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: sha256_hex(canonical.as_bytes()),
        master_seed: cfg.seed,
        created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        blocks,
        files: w.files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(opts.out_dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Parse and run a configuration file's text.
pub fn run_text(text: &str, opts: &RunOptions) -> Result<RunManifest, Error> {
    orchestrate(&crate::config::parse_config(text)?, opts)
}
