//! Spectrogram-shaped datasets: a synthetic generator and a binary feature
//! file format for precomputed features.
//!
//! Feature file layout, all integers little-endian `u32`:
//!
//! ```text
//! "SPTRIM1\n"  K  count  t  f
//! count x ( label  t*f x f32 row-major )
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"SPTRIM1\n";

/// Fraction of each class held out for validation (taken from the end).
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `t x f` spectrogram.
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    t: usize,
    f: usize,
    examples: Vec<Example>,
    train: Vec<usize>,
    validation: Vec<usize>,
    seed: Option<u64>,
}

impl Dataset {
    /// Validates labels and shapes and splits off the last 20 % of every
    /// class (in example order) as validation data.
    pub fn new(num_classes: usize, t: usize, f: usize, examples: Vec<Example>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("a dataset needs at least two classes".into()));
        }
        for ex in &examples {
            if ex.label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: ex.label as u32,
                    classes: num_classes as u32,
                });
            }
            if ex.input.shape() != [t, f] {
                return dim_err(format!("example of shape {:?} in a {t}x{f} dataset", ex.input.shape()));
            }
        }
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, ex) in examples.iter().enumerate() {
            per_class[ex.label].push(i);
        }
        let mut train = Vec::new();
        let mut validation = Vec::new();
        for idx in &per_class {
            let n_val = (idx.len() as f64 * VALIDATION_FRACTION).floor() as usize;
            let cut = idx.len() - n_val;
            train.extend_from_slice(&idx[..cut]);
            validation.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        validation.sort_unstable();
        Ok(Self {
            num_classes,
            t,
            f,
            examples,
            train,
            validation,
            seed: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(t, f)` of every example.
    pub fn dims(&self) -> (usize, usize) {
        (self.t, self.f)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indices of training examples, ascending.
    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    /// Indices of validation examples, ascending.
    pub fn validation_indices(&self) -> &[usize] {
        &self.validation
    }

    /// Seed of the generator, when the dataset is synthetic.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.examples[i]
    }
}

/// Parameters of the synthetic ridge dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub t: usize,
    pub f: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Four classes, 500 examples each, 32x16 inputs, noise 0.5.
    pub fn toy(seed: u64) -> Self {
        Self {
            num_classes: 4,
            per_class: 500,
            t: 32,
            f: 16,
            noise_sigma: 0.5,
            seed,
        }
    }
}

/// Class `k` is a ridge of amplitude 1 over frequency band `k` (of `K` equal
/// bands) lasting half the clip, starting at a random time offset; i.i.d.
/// Gaussian noise is added everywhere. Values are rounded to `f32` so that
/// the dataset survives the feature file format unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec { num_classes: k, per_class, t, f, noise_sigma, seed } = *spec;
    if k < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    if k > f {
        return Err(Error::Config(format!("{k} classes do not fit into {f} frequency bins")));
    }
    if t == 0 || per_class == 0 {
        return Err(Error::Config("empty time axis or class".into()));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ridge_len = t.div_ceil(2);
    let mut examples = Vec::with_capacity(k * per_class);
    for _ in 0..per_class {
        for label in 0..k {
            let band = (label * f / k)..((label + 1) * f / k);
            let start = rng.random_range(0..=t - ridge_len);
            let mut data = vec![0.0; t * f];
            for (i, row) in data.chunks_mut(f).enumerate() {
                let on = (start..start + ridge_len).contains(&i);
                for (j, v) in row.iter_mut().enumerate() {
                    let signal = if on && band.contains(&j) { 1.0 } else { 0.0 };
                    let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    *v = f64::from((signal + n) as f32);
                }
            }
            examples.push(Example {
                input: Tensor::new(&[t, f], data)?,
                label,
            });
        }
    }
    let mut ds = Dataset::new(k, t, f, examples)?;
    ds.seed = Some(seed);
    Ok(ds)
}

/// Writes `ds` in the feature file format. Inputs are stored as `f32`.
pub fn save_features(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + ds.len() * (4 + 4 * ds.t * ds.f));
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [ds.num_classes, ds.len(), ds.t, ds.f] {
        buf.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    for ex in &ds.examples {
        buf.extend_from_slice(&to_u32(ex.label)?.to_le_bytes());
        for &v in ex.input.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_features(&fs::read(path)?)
}

pub fn decode_features(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(FEATURE_MAGIC.len(), "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(FEATURE_MAGIC).into_owned(),
        });
    }
    let k = r.u32("header")?;
    let count = r.u32("header")? as usize;
    let t = r.u32("header")? as usize;
    let f = r.u32("header")? as usize;
    if t == 0 || f == 0 {
        return Err(Error::Format(format!("zero input dimension {t}x{f}")));
    }
    let mut examples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = r.u32("example label")?;
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let raw = r.take(4 * t * f, "example data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        examples.push(Example {
            input: Tensor::new(&[t, f], data)?,
            label: label as usize,
        });
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after the last example".into()));
    }
    Dataset::new(k as usize, t, f, examples)
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in a u32 field")))
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
