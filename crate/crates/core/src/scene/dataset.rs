//! JSON Lines persistence, one scene per line, tagged `"v": 1`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::Scene;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct LineOut<'a> {
    v: u32,
    #[serde(flatten)]
    scene: &'a Scene,
}

#[derive(Deserialize)]
struct LineIn {
    v: u32,
    #[serde(flatten)]
    scene: Scene,
}

pub fn scene_to_line(scene: &Scene) -> Result<String> {
    Ok(serde_json::to_string(&LineOut {
        v: SCHEMA_VERSION,
        scene,
    })?)
}

pub fn dataset_write(scenes: &[Scene], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = scene_to_line(s)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads every scene; blank lines are skipped and line numbers are 1-based.
pub fn dataset_read(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let parsed: LineIn = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if parsed.v != SCHEMA_VERSION {
            return Err(parse_err(format!(
                "unsupported schema version {}, expected {SCHEMA_VERSION}",
                parsed.v
            )));
        }
        out.push(parsed.scene);
    }
    Ok(out)
}
