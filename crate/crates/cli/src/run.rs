//! Per-invocation state: flag resolution against an optional config file,
//! the output directory, the worker pool and the manifest.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mhex_core::config::KvConfig;

use crate::CommonArgs;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";

pub struct Run {
    pub out: PathBuf,
    pub seed: u64,
    file: KvConfig,
    resolved: KvConfig,
    manifest: Vec<(String, String, String)>,
    pool: rayon::ThreadPool,
}

impl Run {
    pub fn start(command: &str, common: &CommonArgs) -> Result<Run> {
        let file = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                KvConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => KvConfig::new(),
        };
        if let Some(c) = file.raw("command") {
            if c != command {
                bail!("config was written by `{c}`, not `{command}`");
            }
        }
        let out = match std::env::var_os("MHEX_OUT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => common.out.clone(),
        };
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut resolved = KvConfig::new();
        resolved.set("command", command);
        let mut run = Run {
            out,
            seed: 0,
            file,
            resolved,
            manifest: Vec::new(),
            pool: rayon::ThreadPoolBuilder::new().build()?,
        };
        run.seed = run.pick("seed", common.seed, || 0)?;
        let workers = run.pick("workers", common.workers, || 0)?;
        run.pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()?;
        Ok(run)
    }

    /// Flag value, else the config file's value, else the default; the
    /// result is recorded in the resolved config.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: impl FnOnce() -> T) -> Result<T>
    where
        T: FromStr + Display,
    {
        let v = match flag {
            Some(v) => v,
            None if self.file.contains(key) => self
                .file
                .get(key)
                .with_context(|| format!("config key `{key}`"))?,
            None => default(),
        };
        self.resolved.set(key, &v);
        Ok(v)
    }

    /// Like [`Run::pick`] for values that may stay unset.
    pub fn pick_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
    {
        let v = match flag {
            Some(v) => Some(v),
            None if self.file.contains(key) => Some(
                self.file
                    .get(key)
                    .with_context(|| format!("config key `{key}`"))?,
            ),
            None => None,
        };
        if let Some(v) = &v {
            self.resolved.set(key, v);
        }
        Ok(v)
    }

    /// A switch is on when given on the command line or set in the config.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let on = flag
            || (self.file.contains(key)
                && self
                    .file
                    .get::<bool>(key)
                    .with_context(|| format!("config key `{key}`"))?);
        self.resolved.set(key, on);
        Ok(on)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Records an artifact; `sample` is `None` for run-level files.
    pub fn artifact(&mut self, sample: Option<usize>, method: &str, file: &Path) {
        let rel = file.strip_prefix(&self.out).unwrap_or(file);
        self.manifest.push((
            sample.map_or_else(|| "-".to_string(), |s| s.to_string()),
            method.to_string(),
            rel.display().to_string(),
        ));
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(self) -> Result<()> {
        self.write(CONFIG_FILE, self.resolved.to_text())?;
        let mut m = String::from("sample,method,file\n");
        for (s, method, f) in &self.manifest {
            m.push_str(&format!("{s},{method},{f}\n"));
        }
        m.push_str(&format!("-,config,{CONFIG_FILE}\n"));
        self.write(MANIFEST_FILE, m)?;
        println!("wrote {}", self.out.display());
        Ok(())
    }
}
