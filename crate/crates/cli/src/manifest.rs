use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use prefval::config::ExperimentConfig;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Resolved settings, seeds, and input fingerprints of one CLI run.
pub struct Manifest {
    table: Table,
    inputs: Table,
    outputs: Vec<Value>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut table = Table::new();
        table.insert("command".into(), command.into());
        table.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        let argv: Vec<Value> = std::env::args().skip(1).map(Value::from).collect();
        table.insert("argv".into(), Value::Array(argv));
        Self {
            table,
            inputs: Table::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.table.insert(key.into(), value.into());
        self
    }

    /// Root seed, every derived seed, and the full resolved config.
    pub fn config(&mut self, cfg: &ExperimentConfig) -> Result<&mut Self> {
        let mut seeds = Table::new();
        seeds.insert("root".into(), seed_value(cfg.experiment.seed));
        for (label, seed) in cfg.derived_seeds() {
            seeds.insert(label.into(), seed_value(seed));
        }
        self.table.insert("seeds".into(), Value::Table(seeds));
        self.table.insert("config".into(), Value::Table(Table::try_from(cfg)?));
        Ok(self)
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), format!("sha256:{digest}").into());
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.display().to_string().into());
        self
    }

    pub fn write(mut self, path: &Path) -> Result<PathBuf> {
        self.table.insert("inputs".into(), Value::Table(self.inputs));
        self.table.insert("outputs".into(), Value::Array(self.outputs));
        let text = toml::to_string(&self.table)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path.to_path_buf())
    }
}

// TOML integers are i64; seeds are stored as hex strings to keep all 64 bits.
fn seed_value(seed: u64) -> Value {
    format!("{seed:#018x}").into()
}
