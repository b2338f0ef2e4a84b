//! FCDS1 dataset files: magic, `u64` header length, JSON header, then per
//! utterance a `u32` spec length, the spec as JSON, the features and the
//! ground-truth emotion track, both as little-endian `f32` in row-major order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io::write_atomic;
use crate::synthdata::{
    gen_utterance, random_spec, EmotionTrack, FeatureMatrix, Layout, SpecSampler, SynthDomain, SynthUtterance,
    UtteranceSpec,
};
use crate::tensor::{round_to_f32, Mat};

pub const DATASET_MAGIC: &[u8; 5] = b"FCDS1";

/// Everything needed to regenerate the dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub layout: Layout,
    pub codebook_seed: u64,
    pub speaker_table_seed: u64,
    pub seed: u64,
    pub count: usize,
    pub sampler: SpecSampler,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            layout: Layout::default(),
            codebook_seed: 1,
            speaker_table_seed: 2,
            seed: 0,
            count: 2000,
            sampler: SpecSampler::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        self.sampler.validate()?;
        ensure!(self.count >= 1, Config, "dataset.count must be at least 1");
        Ok(())
    }

    pub fn domain(&self) -> Result<SynthDomain> {
        SynthDomain::new(self.layout, self.codebook_seed, self.speaker_table_seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub domain: SynthDomain,
    pub utterances: Vec<SynthUtterance>,
}

fn to_f32_grid(m: &mut Mat) {
    m.data.iter_mut().for_each(|v| *v = round_to_f32(*v));
}

impl Dataset {
    /// Draws `count` specs from one stream; utterance `i` uses noise seed
    /// `seed * count + i`. Values are stored on the f32 grid.
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let domain = config.domain()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let utterances = (0..config.count)
            .map(|i| {
                let spec = random_spec(&mut rng, &domain.layout, &config.sampler);
                let noise_seed = config.seed.wrapping_mul(config.count as u64).wrapping_add(i as u64);
                let mut u = gen_utterance(&domain, &spec, noise_seed)?;
                to_f32_grid(&mut u.features.data);
                to_f32_grid(&mut u.emotion.data);
                Ok(u)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            domain,
            utterances,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.config).map_err(|e| Error::Contract(format!("dataset header: {e}")))?;
        let mut out = DATASET_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for u in &self.utterances {
            let spec = serde_json::to_vec(&u.spec).map_err(|e| Error::Contract(format!("utterance spec: {e}")))?;
            out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
            out.extend_from_slice(&spec);
            for v in u.features.data.data.iter().chain(&u.emotion.data.data) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            path,
            bytes: &bytes,
            pos: 0,
        };
        let magic = r.take(DATASET_MAGIC.len(), "magic").unwrap_or(&bytes[..]);
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
        let config: DatasetConfig = serde_json::from_slice(r.take(len, "header")?).map_err(|e| r.bad(e.to_string()))?;
        config.validate()?;
        let domain = config.domain()?;
        let f = config.layout.freq_bins;
        let mut utterances = Vec::with_capacity(config.count);
        for i in 0..config.count {
            let what = format!("utterance {i}");
            let n = u32::from_le_bytes(r.take(4, &what)?.try_into().expect("4 bytes")) as usize;
            let spec: UtteranceSpec =
                serde_json::from_slice(r.take(n, &what)?).map_err(|e| r.bad(format!("{what}: {e}")))?;
            spec.validate(&config.layout)?;
            let t = spec.total_frames();
            let features = FeatureMatrix::new(Mat::from_vec(f, t, r.f32s(f * t, &what)?))?;
            let emotion = EmotionTrack::new(Mat::from_vec(2, t, r.f32s(2 * t, &what)?))?;
            utterances.push(SynthUtterance {
                features,
                spec,
                emotion,
            });
        }
        if r.pos != bytes.len() {
            return Err(r.bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            domain,
            utterances,
        })
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                tensor: what.to_string(),
                needed: n,
                available: self.bytes.len() - self.pos,
            }),
        }
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn bad(&self, reason: String) -> Error {
        Error::BadHeader {
            path: self.path.to_path_buf(),
            reason,
        }
    }
}
