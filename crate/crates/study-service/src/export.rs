//! Export to the inputs of the ranking analysis.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iconoloc::study::{profiles_csv, rankings_csv};
use serde::{Deserialize, Serialize};

use crate::store::{Result, Store};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Export {
    pub rankings_csv: String,
    pub profiles_csv: String,
    /// One JSON object per line: session, pair, RLE mask, submission time.
    pub masks_jsonl: String,
}

pub const RANKINGS_FILE: &str = "rankings.csv";
pub const PROFILES_FILE: &str = "profiles.csv";
pub const MASKS_FILE: &str = "masks.jsonl";

pub fn export(store: &Store) -> Result<Export> {
    let (records, profiles) = store.export_records()?;
    let mut masks_jsonl = String::new();
    for a in store.export_annotations()? {
        let _ = writeln!(masks_jsonl, "{}", serde_json::to_string(&a).expect("serializable"));
    }
    Ok(Export { rankings_csv: rankings_csv(&records), profiles_csv: profiles_csv(&profiles), masks_jsonl })
}

impl Export {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (name, body) in [(RANKINGS_FILE, &self.rankings_csv), (PROFILES_FILE, &self.profiles_csv), (MASKS_FILE, &self.masks_jsonl)] {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            out.push(p);
        }
        Ok(out)
    }
}
