//! Checkpoint payloads: flat little-endian parameter arrays plus a TOML
//! manifest describing how to rebuild each network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, HiddenActivation, Mlp, Normalizer, OutputActivation, Scalar};
use crate::error::{Error, Result};

/// Manifest entry for one learned head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub name: String,
    pub layer_sizes: Vec<usize>,
    pub hidden: HiddenActivation,
    pub output: OutputActivation,
    pub optimizer_steps: u64,
    /// Parameter file, relative to the checkpoint directory.
    pub file: String,
    /// Adam moments file (first then second moment), relative as above.
    pub moments_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerRecord {
    pub name: String,
    pub dim: usize,
    pub count: f64,
    pub min_std: f64,
    /// Mean then variance.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub heads: Vec<HeadRecord>,
    pub normalizers: Vec<NormalizerRecord>,
}

impl CheckpointManifest {
    pub fn new<T: Scalar>() -> Self {
        Self {
            format_version: 1,
            dtype: T::DTYPE.to_string(),
            heads: Vec::new(),
            normalizers: Vec::new(),
        }
    }

    pub fn head(&self, name: &str) -> Option<&HeadRecord> {
        self.heads.iter().find(|h| h.name == name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::format(dir.join("manifest.toml"), e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn write_flat<T: Scalar>(path: &Path, values: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flat<T: Scalar>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % T::BYTES != 0 {
        return Err(Error::format(
            path,
            format!("length {} not a multiple of {}", bytes.len(), T::BYTES),
        ));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

/// Write a network and its optimizer state; returns the manifest entry.
pub fn save_head<T: Scalar>(
    dir: &Path,
    name: &str,
    mlp: &Mlp<T>,
    opt: &AdamState<T>,
) -> Result<HeadRecord> {
    let file = format!("{name}.params.bin");
    let moments_file = format!("{name}.adam.bin");
    write_flat(&dir.join(&file), mlp.params())?;
    let (m, v) = opt.moments();
    let mut both = m.to_vec();
    both.extend_from_slice(v);
    write_flat(&dir.join(&moments_file), &both)?;
    Ok(HeadRecord {
        name: name.to_string(),
        layer_sizes: mlp.layer_sizes().to_vec(),
        hidden: mlp.hidden_activation(),
        output: mlp.output_activation(),
        optimizer_steps: opt.step_count(),
        file,
        moments_file,
    })
}

pub fn load_head<T: Scalar>(
    dir: &Path,
    record: &HeadRecord,
    config: AdamConfig,
) -> Result<(Mlp<T>, AdamState<T>)> {
    let params = read_flat(&dir.join(&record.file))?;
    let mlp = Mlp::from_params(&record.layer_sizes, record.hidden, record.output, params)?;
    let mut opt = AdamState::new(mlp.num_params(), config);
    let moments: Vec<T> = read_flat(&dir.join(&record.moments_file))?;
    if moments.len() != 2 * mlp.num_params() {
        return Err(Error::format(
            dir.join(&record.moments_file),
            "moment count does not match parameters",
        ));
    }
    let (m, v) = moments.split_at(mlp.num_params());
    opt.restore(record.optimizer_steps, m.to_vec(), v.to_vec())?;
    Ok((mlp, opt))
}

pub fn save_normalizer<T: Scalar>(
    dir: &Path,
    name: &str,
    norm: &Normalizer<T>,
) -> Result<NormalizerRecord> {
    let file = format!("{name}.norm.bin");
    let mut both = norm.mean().to_vec();
    both.extend_from_slice(norm.var());
    write_flat(&dir.join(&file), &both)?;
    Ok(NormalizerRecord {
        name: name.to_string(),
        dim: norm.dim(),
        count: norm.count().to_f64().unwrap_or(0.0),
        min_std: norm.min_std().to_f64().unwrap_or(0.0),
        file,
    })
}

pub fn load_normalizer<T: Scalar>(dir: &Path, record: &NormalizerRecord) -> Result<Normalizer<T>> {
    let values: Vec<T> = read_flat(&dir.join(&record.file))?;
    if values.len() != 2 * record.dim {
        return Err(Error::format(
            dir.join(&record.file),
            "normalizer payload does not match dim",
        ));
    }
    let (mean, var) = values.split_at(record.dim);
    Normalizer::from_parts(
        mean.to_vec(),
        var.to_vec(),
        T::of(record.count),
        T::of(record.min_std),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::new(
            &[3, 4, 2],
            HiddenActivation::Elu,
            OutputActivation::Tanh,
            &mut rng,
        )
        .unwrap();
        let mut opt = AdamState::new(net.num_params(), AdamConfig::default());
        let mut p = net.params().to_vec();
        let g = vec![0.1; p.len()];
        opt.step(&mut p, &g).unwrap();
        let net =
            Mlp::from_params(&[3, 4, 2], HiddenActivation::Elu, OutputActivation::Tanh, p).unwrap();

        let mut manifest = CheckpointManifest::new::<f64>();
        manifest
            .heads
            .push(save_head(dir.path(), "head", &net, &opt).unwrap());
        manifest.write(dir.path()).unwrap();

        let back = CheckpointManifest::read(dir.path()).unwrap();
        assert_eq!(back, manifest);
        let (net2, opt2) = load_head::<f64>(
            dir.path(),
            back.head("head").unwrap(),
            AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(net2, net);
        assert_eq!(opt2.step_count(), 1);
        assert_eq!(opt2.moments(), opt.moments());
    }

    #[test]
    fn flat_file_is_little_endian_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_flat(&path, &[1.5f64, -2.0]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..8], &1.5f64.to_le_bytes());
    }
}
