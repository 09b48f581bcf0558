//! On-disk map files: `{image_id}__{class}__{method}.npyish` holds the grid
//! as a little-endian `f8` NPY array of shape `(H, W)`; the `.meta` file next
//! to it holds `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::{read_npy, write_npy, ReadNpyError, WriteNpyError};
use thiserror::Error;

use super::{MethodId, PassCounter, SaliencyMap};

pub const MAP_EXTENSION: &str = "npyish";
pub const META_EXTENSION: &str = "meta";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    ReadArray { path: PathBuf, source: ReadNpyError },
    #[error("{path}: {source}")]
    WriteArray { path: PathBuf, source: WriteNpyError },
    #[error("{path}:{line}: {message}")]
    Meta { path: PathBuf, line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Sidecar contents.
#[derive(Debug, Clone, PartialEq)]
pub struct MapMeta {
    pub image_id: String,
    pub class: String,
    pub method: MethodId,
    pub prompt: String,
    pub backbone: String,
    pub config_hash: String,
    pub degenerate: bool,
    pub passes: PassCounter,
}

impl MapMeta {
    pub fn for_map(map: &SaliencyMap, backbone: &str, config_hash: &str) -> Self {
        MapMeta {
            image_id: map.image_id.clone(),
            class: map.class.clone(),
            method: map.method,
            prompt: map.prompt.clone(),
            backbone: backbone.to_string(),
            config_hash: config_hash.to_string(),
            degenerate: map.degenerate,
            passes: map.passes,
        }
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("image_id", self.image_id.clone()),
            ("class", self.class.clone()),
            ("method", self.method.to_string()),
            ("prompt", self.prompt.clone()),
            ("backbone", self.backbone.clone()),
            ("config_hash", self.config_hash.clone()),
            ("degenerate", self.degenerate.to_string()),
            ("forward_passes", self.passes.forward_passes.to_string()),
            ("backward_passes", self.passes.backward_passes.to_string()),
        ] {
            out.push_str(k);
            out.push('=');
            out.push_str(&v.replace('\n', " "));
            out.push('\n');
        }
        out
    }

    fn parse(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, message: String| StoreError::Meta { path: path.to_path_buf(), line, message };
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, format!("expected key=value, got `{line}`")))?;
            kv.insert(k.trim().to_string(), (i + 1, v.to_string()));
        }
        let last = text.lines().count();
        let mut take = |key: &str| kv.remove(key).ok_or_else(|| err(last, format!("missing key `{key}`")));
        let (line, method) = take("method")?;
        let method = method.parse().map_err(|e| err(line, format!("{e}")))?;
        let mut count = |key: &str| -> Result<usize> {
            let (line, v) = take(key)?;
            v.parse().map_err(|_| err(line, format!("`{key}` is not a count")))
        };
        let passes = PassCounter { forward_passes: count("forward_passes")?, backward_passes: count("backward_passes")? };
        let (line, degenerate) = take("degenerate")?;
        let degenerate = degenerate.parse().map_err(|_| err(line, "`degenerate` must be true or false".into()))?;
        Ok(MapMeta {
            image_id: take("image_id")?.1,
            class: take("class")?.1,
            method,
            prompt: take("prompt")?.1,
            backbone: take("backbone")?.1,
            config_hash: take("config_hash")?.1,
            degenerate,
            passes,
        })
    }
}

fn sanitize(part: &str) -> String {
    part.chars().map(|c| if c == '/' || c == '\\' || c.is_control() { '_' } else { c }).collect()
}

/// File name of the map for one image, class and method.
pub fn map_file_name(image_id: &str, class: &str, method: MethodId) -> String {
    format!("{}__{}__{}.{MAP_EXTENSION}", sanitize(image_id), sanitize(class), method)
}

pub fn meta_path(map_path: &Path) -> PathBuf {
    map_path.with_extension(META_EXTENSION)
}

/// Writes the map and its sidecar into `dir`, returning the map path.
pub fn write_map(dir: &Path, values: &Array2<f64>, meta: &MapMeta) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;
    let path = dir.join(map_file_name(&meta.image_id, &meta.class, meta.method));
    write_npy(&path, values).map_err(|source| StoreError::WriteArray { path: path.clone(), source })?;
    let mp = meta_path(&path);
    fs::write(&mp, meta.to_text()).map_err(|source| StoreError::Io { path: mp, source })?;
    Ok(path)
}

pub fn read_meta(map_path: &Path) -> Result<MapMeta> {
    let mp = meta_path(map_path);
    let text = fs::read_to_string(&mp).map_err(|source| StoreError::Io { path: mp.clone(), source })?;
    MapMeta::parse(&mp, &text)
}

pub fn read_values(map_path: &Path) -> Result<Array2<f64>> {
    read_npy(map_path).map_err(|source| StoreError::ReadArray { path: map_path.to_path_buf(), source })
}

pub fn read_map(map_path: &Path) -> Result<(Array2<f64>, MapMeta)> {
    Ok((read_values(map_path)?, read_meta(map_path)?))
}
