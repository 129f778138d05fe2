//! Checkpoint archive: a directory holding `manifest.txt` (name, shape,
//! dtype, byte offset per parameter), `params.bin` (little-endian f32,
//! row-major, manifest order) and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tarfvae_core::data::GlobalStats;
use tarfvae_core::model::{ModelConfig, Tarfvae};
use tarfvae_core::nn::ParamStore;
use tarfvae_core::{Real, Tensor};

use crate::error::{io_err, Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
pub const META: &str = "meta.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Train-split statistics mapping raw data to the metric scale.
    pub stats: GlobalStats,
    pub steps: u64,
    pub val_score: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Resolved run configuration (TOML) that produced the checkpoint.
    pub config: Option<String>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, stats: GlobalStats) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            stats,
            steps: 0,
            val_score: None,
            best_epoch: None,
            config: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Tarfvae<T>, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            params: model.params.cast(),
        }
    }

    pub fn model<T: Real>(&self) -> Result<Tarfvae<T>> {
        Ok(Tarfvae::with_params(self.meta.model.clone(), &self.params)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = String::from("# name\tshape\tdtype\toffset\n");
        let mut blob = Vec::with_capacity(self.params.num_scalars() * 4);
        for (_, name, t) in self.params.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\tf32\t{}\n", shape.join(","), blob.len()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write(&dir.join(MANIFEST), manifest.as_bytes())?;
        write(&dir.join(BLOB), &blob)?;
        write(&dir.join(META), serde_json::to_string_pretty(&self.meta)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            message,
        };
        let meta_path = dir.join(META);
        let meta: CheckpointMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", meta.format_version)));
        }
        let man_path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
        let blob_path = dir.join(BLOB);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;

        let mut params = ParamStore::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, dtype, offset] = fields[..] else {
                return Err(bad(format!("manifest line {}: expected 4 fields", lineno + 1)));
            };
            if dtype != "f32" {
                return Err(bad(format!("`{name}`: unsupported dtype {dtype}")));
            }
            let shape: Vec<usize> = shape
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("`{name}`: bad shape `{shape}`")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| bad(format!("`{name}`: bad offset `{offset}`")))?;
            if offset != expected_offset {
                return Err(bad(format!("`{name}`: offset {offset}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            let bytes = blob
                .get(offset..end)
                .ok_or_else(|| bad(format!("`{name}`: blob too short")))?;
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.add(name, Tensor::new(&shape, values)?)?;
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(bad(format!(
                "blob has {} bytes, manifest covers {expected_offset}",
                blob.len()
            )));
        }
        Ok(Self { meta, params })
    }

    /// Errors listing every architecture field where the checkpoint and
    /// `wanted` disagree.
    pub fn check_compatible(&self, wanted: &ModelConfig) -> Result<()> {
        let diffs = config_diff(&self.meta.model, wanted);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Mismatch(diffs.join("; ")))
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(PathBuf::from(path)))
}

/// `field: checkpoint A, config B` for each differing field.
pub fn config_diff(ckpt: &ModelConfig, cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    macro_rules! cmp {
        ($($f:ident),*) => {$(
            if ckpt.$f != cfg.$f {
                out.push(format!("{}: checkpoint {}, config {}", stringify!($f), ckpt.$f, cfg.$f));
            }
        )*};
    }
    cmp!(channels, lookback, horizon, latent_dim, flow_blocks, flow_layers, mlp_blocks, hidden_mult, heads, s_max, logvar_clamp);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tarfvae_core::rng::{stream, Stream};

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::new(2, 8, 4);
        c.latent_dim = 4;
        c.heads = 2;
        c.flow_blocks = 2;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Tarfvae::<f32>::new(tiny(), &mut stream(7, Stream::Init)).unwrap();
        let mut meta = CheckpointMeta::new(tiny(), GlobalStats::identity(2));
        meta.steps = 12;
        meta.val_score = Some(0.25);
        let ck = Checkpoint::from_model(&model, meta.clone());
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.meta, meta);
        for ((_, n1, a), (_, n2, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let m2: Tarfvae<f32> = back.model().unwrap();
        assert_eq!(m2.params, model.params);
    }

    #[test]
    fn manifest_lists_offsets() {
        let model = Tarfvae::<f32>::new(tiny(), &mut stream(1, Stream::Init)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_model(&model, CheckpointMeta::new(tiny(), GlobalStats::identity(2)))
            .save(dir.path())
            .unwrap();
        let man = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let rows: Vec<&str> = man.lines().skip(1).collect();
        assert_eq!(rows.len(), model.params.len());
        assert!(rows[0].ends_with("\tf32\t0"));
        let blob = fs::metadata(dir.path().join(BLOB)).unwrap().len() as usize;
        assert_eq!(blob, 4 * model.params.num_scalars());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let model = Tarfvae::<f32>::new(tiny(), &mut stream(1, Stream::Init)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::from_model(&model, CheckpointMeta::new(tiny(), GlobalStats::identity(2)))
            .save(dir.path())
            .unwrap();
        let p = dir.path().join(BLOB);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn diff_names_both_values() {
        let mut other = tiny();
        other.horizon = 96;
        let d = config_diff(&tiny(), &other);
        assert_eq!(d, ["horizon: checkpoint 4, config 96"]);
    }
}
