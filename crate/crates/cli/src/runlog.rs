//! The per-run log. It is the only artifact that carries timestamps.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

pub struct RunLog {
    file: Mutex<File>,
}

impl RunLog {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let file = OpenOptions::new().create(true).append(true).open(dir.join("run.log"))?;
        Ok(RunLog { file: Mutex::new(file) })
    }

    pub fn line(&self, msg: impl AsRef<str>) {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        // a failed log write must not fail the run
        let _ = writeln!(f, "[{}.{:03}] {}", t.as_secs(), t.subsec_millis(), msg.as_ref());
    }
}
