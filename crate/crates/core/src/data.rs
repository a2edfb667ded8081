//! Synthetic multi-domain images: class-conditional shape content rendered
//! under a per-domain style (per-channel affine map plus a sinusoidal
//! texture), and leave-one-domain-out sharding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Number of distinct shape families available as classes.
pub const MAX_CLASSES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: usize,
    /// Per-channel multiplier applied to the content.
    pub scale: Vec<f64>,
    /// Per-channel offset.
    pub shift: Vec<f64>,
    /// Texture cycles across the image width; 0 disables the texture.
    pub freq: f64,
    pub amp: f64,
    /// Texture direction in radians.
    pub angle: f64,
}

impl DomainSpec {
    /// Unit scale, zero shift, no texture.
    pub fn raw(id: usize, channels: usize) -> Self {
        Self { id, scale: vec![1.0; channels], shift: vec![0.0; channels], freq: 0.0, amp: 0.0, angle: 0.0 }
    }
}

/// The four default domains. Domain 0 is plain; the others shift colour
/// statistics and add progressively stronger textures.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec { id: 0, scale: vec![1.0, 1.0, 1.0], shift: vec![0.0, 0.0, 0.0], freq: 0.0, amp: 0.0, angle: 0.0 },
        DomainSpec { id: 1, scale: vec![3.0, 0.4, 1.5], shift: vec![1.5, -1.0, 0.5], freq: 2.0, amp: 0.5, angle: 0.0 },
        DomainSpec { id: 2, scale: vec![0.3, 2.5, 3.5], shift: vec![-1.2, 1.5, -0.8], freq: 3.0, amp: 0.8, angle: 1.2 },
        DomainSpec { id: 3, scale: vec![2.2, 3.5, 0.3], shift: vec![-1.5, -0.8, 1.8], freq: 4.0, amp: 0.6, angle: 2.3 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub domains: Vec<DomainSpec>,
    pub classes: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-pixel content noise.
    pub noise: f64,
    /// Per-instance colour tint is drawn from `[1 - tint_jitter, 1]` per
    /// channel; this is the style variety inside a single domain.
    pub tint_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: default_domains(),
            classes: 5,
            train_per_domain: 600,
            test_per_domain: 300,
            channels: 3,
            height: 16,
            width: 16,
            noise: 0.1,
            tint_jitter: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.domains.len() < 2 {
            return Err(Error::Config("need at least 2 domains".into()));
        }
        if !(0.0..1.0).contains(&self.tint_jitter) || !(self.noise >= 0.0) {
            return Err(Error::Config("tint_jitter must be in [0, 1) and noise non-negative".into()));
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::Config("images must have a channel and be at least 4x4".into()));
        }
        for d in &self.domains {
            if d.scale.len() != self.channels || d.shift.len() != self.channels {
                return Err(Error::Config(format!("domain {} style does not have {} channels", d.id, self.channels)));
            }
        }
        let mut ids: Vec<usize> = self.domains.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.domains.len() {
            return Err(Error::Config("domain ids must be unique".into()));
        }
        Ok(())
    }
}

/// Labelled images, `(C, H, W)` each, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    /// Stable sample identifiers, unique within a generated dataset.
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn empty(channels: usize, height: usize, width: usize, classes: usize) -> Self {
        Self { channels, height, width, classes, images: Vec::new(), labels: Vec::new(), domains: Vec::new(), ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f64], label: usize, domain: usize, id: u64) {
        assert_eq!(image.len(), self.item_len(), "image size");
        self.images.extend_from_slice(image);
        self.labels.push(label);
        self.domains.push(domain);
        self.ids.push(id);
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.channels, self.height, self.width, self.classes);
        for &i in idx {
            out.push(self.image(i), self.labels[i], self.domains[i], self.ids[i]);
        }
        out
    }

    pub fn concat(&self, other: &Dataset) -> Self {
        let mut out = self.clone();
        for i in 0..other.len() {
            out.push(other.image(i), other.labels[i], other.domains[i], other.ids[i]);
        }
        out
    }

    pub fn domain_indices(&self, d: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == d).collect()
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        let mut d = self.domains.clone();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Images `idx` as a batch tensor with their labels.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * self.item_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor4::from_vec([idx.len(), self.channels, self.height, self.width], data)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    const MAGIC: &'static [u8; 8] = b"SDDGDATA";

    /// `MAGIC`, then `u64` LE `(version, n, C, H, W, classes)`, then per
    /// sample `u64` LE `(label, domain, id)` followed by `C*H*W` `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(56 + self.len() * (24 + 8 * self.item_len()));
        out.extend_from_slice(Self::MAGIC);
        for v in [1, self.len(), self.channels, self.height, self.width, self.classes] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for i in 0..self.len() {
            for v in [self.labels[i] as u64, self.domains[i] as u64, self.ids[i]] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in self.image(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("dataset: {m}"));
        if bytes.len() < 56 || &bytes[..8] != Self::MAGIC {
            return Err(fmt("bad magic or truncated header"));
        }
        let word = |k: usize| u64::from_le_bytes(bytes[k..k + 8].try_into().unwrap());
        let header: Vec<usize> = (0..6).map(|k| word(8 + 8 * k) as usize).collect();
        let [version, n, c, h, w, classes] = header[..] else { unreachable!() };
        if version != 1 {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let item = c * h * w;
        let record = 24 + 8 * item;
        if bytes.len() != 56 + n * record {
            return Err(fmt(&format!("{} bytes, header implies {}", bytes.len(), 56 + n * record)));
        }
        let mut ds = Self::empty(c, h, w, classes);
        let mut image = vec![0.0; item];
        for s in 0..n {
            let base = 56 + s * record;
            let (label, domain, id) = (word(base) as usize, word(base + 8) as usize, word(base + 16));
            if label >= classes {
                return Err(fmt(&format!("label {label} out of range for {classes} classes")));
            }
            for (k, v) in image.iter_mut().enumerate() {
                let o = base + 24 + 8 * k;
                *v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
            }
            ds.push(&image, label, domain, id);
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Train and test splits of every domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DomainData {
    /// All samples of domain `d`, train then test.
    pub fn whole_domain(&self, d: usize) -> Dataset {
        self.train.subset(&self.train.domain_indices(d)).concat(&self.test.subset(&self.test.domain_indices(d)))
    }
}

fn instance_seed(seed: u64, domain: usize, index: usize) -> u64 {
    // splitmix64 over the packed tuple
    let mut z = seed ^ ((domain as u64) << 40) ^ (index as u64);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Class shape mask value at normalized coordinates `(u, v)` in `[-1, 1]`.
fn shape_mask(class: usize, u: f64, v: f64, size: f64) -> f64 {
    let inside = |b: bool| if b { 1.0 } else { 0.0 };
    let r = (u * u + v * v).sqrt();
    match class {
        0 => inside(r < 0.6 * size),
        1 => inside(u.abs() < 0.5 * size && v.abs() < 0.5 * size),
        2 => inside((v * 3.0 / size).rem_euclid(2.0) < 1.0 && u.abs() < 0.8),
        3 => inside((u * 3.0 / size).rem_euclid(2.0) < 1.0 && v.abs() < 0.8),
        4 => inside((u.abs() < 0.18 * size || v.abs() < 0.18 * size) && r < 0.8 * size),
        5 => inside((u - v).abs() < 0.3 * size),
        6 => inside(r < 0.7 * size && r > 0.4 * size),
        _ => inside(v > -0.6 * size && v < 0.6 * size && u.abs() < (v + 0.6 * size) * 0.7),
    }
}

/// Unstyled content of one sample, `C*H*W` values, deterministic in
/// `(class, instance_seed)`.
pub fn render_content(
    class: usize,
    instance_seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    noise: f64,
    tint_jitter: f64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let du = rng.random_range(-0.2..0.2);
    let dv = rng.random_range(-0.2..0.2);
    let size = rng.random_range(0.8..1.2);
    let tint: Vec<f64> = (0..channels).map(|_| 1.0 - tint_jitter * rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0; channels * height * width];
    for y in 0..height {
        let v = 2.0 * (y as f64 + 0.5) / height as f64 - 1.0 - dv;
        for x in 0..width {
            let u = 2.0 * (x as f64 + 0.5) / width as f64 - 1.0 - du;
            let m = shape_mask(class, u, v, size);
            for c in 0..channels {
                let n: f64 = rng.sample(StandardNormal);
                out[(c * height + y) * width + x] = m + noise * n;
            }
        }
    }
    // Every channel is standardized, then scaled by its tint, so the
    // channel statistics of content vary only through the tint.
    let plane = height * width;
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let inv = if var > 0.0 { tint[c] / var.sqrt() } else { 0.0 };
        chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// Applies a domain style to content in place. The texture phase is drawn
/// from `phase_seed`.
pub fn apply_style(image: &mut [f64], domain: &DomainSpec, phase_seed: u64, height: usize, width: usize) {
    let channels = image.len() / (height * width);
    let phase = ChaCha8Rng::seed_from_u64(phase_seed).random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (domain.angle.cos(), domain.angle.sin());
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let i = (c * height + y) * width + x;
                let mut v = domain.scale[c] * image[i] + domain.shift[c];
                if domain.freq != 0.0 && domain.amp != 0.0 {
                    let t = (x as f64 * ca + y as f64 * sa) / width as f64;
                    v += domain.amp * (std::f64::consts::TAU * domain.freq * t + phase + c as f64).sin();
                }
                image[i] = v;
            }
        }
    }
}

/// One styled sample.
pub fn render_sample(cfg: &DataConfig, domain: &DomainSpec, class: usize, instance_seed: u64) -> Vec<f64> {
    let mut img = render_content(class, instance_seed, cfg.channels, cfg.height, cfg.width, cfg.noise, cfg.tint_jitter);
    apply_style(&mut img, domain, instance_seed ^ 0x5EED, cfg.height, cfg.width);
    img
}

/// Balanced labels (`index % classes`); sample `k` of domain `d` has id
/// `d * 2^32 + k`, train samples first.
pub fn generate(cfg: &DataConfig, seed: u64) -> Result<DomainData> {
    cfg.validate()?;
    let mut train = Dataset::empty(cfg.channels, cfg.height, cfg.width, cfg.classes);
    let mut test = train.clone();
    for d in &cfg.domains {
        for k in 0..cfg.train_per_domain + cfg.test_per_domain {
            let class = k % cfg.classes;
            let img = render_sample(cfg, d, class, instance_seed(seed, d.id, k));
            let id = ((d.id as u64) << 32) | k as u64;
            let split = if k < cfg.train_per_domain { &mut train } else { &mut test };
            split.push(&img, class, d.id, id);
        }
    }
    Ok(DomainData { train, test })
}

/// Training data held by one device.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub device: usize,
    pub domain: usize,
    pub data: Dataset,
}

/// Source domains (all except `target`, ascending) go to devices round-robin;
/// devices sharing a domain split its samples round-robin. Returns the
/// shards and the held-out target samples.
pub fn split_leave_one_domain_out(dataset: &Dataset, target: usize, m: usize) -> Result<(Vec<Shard>, Dataset)> {
    let all = dataset.domain_ids();
    if !all.contains(&target) {
        return Err(Error::Input(format!("target domain {target} not in dataset domains {all:?}")));
    }
    let sources: Vec<usize> = all.into_iter().filter(|&d| d != target).collect();
    if sources.is_empty() || m < sources.len() {
        return Err(Error::Input(format!("{m} devices cannot cover {} source domains", sources.len())));
    }
    let assignment: Vec<usize> = (0..m).map(|i| sources[i % sources.len()]).collect();
    let mut shards = Vec::with_capacity(m);
    for (device, &domain) in assignment.iter().enumerate() {
        let sharing: Vec<usize> = (0..m).filter(|&i| assignment[i] == domain).collect();
        let slot = sharing.iter().position(|&i| i == device).unwrap();
        let idx: Vec<usize> = dataset
            .domain_indices(domain)
            .into_iter()
            .enumerate()
            .filter(|(k, _)| k % sharing.len() == slot)
            .map(|(_, i)| i)
            .collect();
        shards.push(Shard { device, domain, data: dataset.subset(&idx) });
    }
    let target_set = dataset.subset(&dataset.domain_indices(target));
    Ok((shards, target_set))
}

/// Endless shuffled pass over a shard; reshuffles at the end of each epoch
/// and wraps around when the shard is smaller than a batch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("cannot sample batches from an empty shard".into()));
        }
        let mut s = Self { order: (0..len).collect(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig { train_per_domain: 20, test_per_domain: 10, ..DataConfig::default() }
    }

    #[test]
    fn identical_styles_give_identical_images() {
        let cfg = small();
        let a = DomainSpec { id: 7, ..cfg.domains[2].clone() };
        assert_eq!(render_sample(&cfg, &a, 3, 99), render_sample(&cfg, &cfg.domains[2], 3, 99));
    }

    #[test]
    fn raw_domain_leaves_content_untouched() {
        let cfg = small();
        let raw = DomainSpec::raw(0, 3);
        assert_eq!(render_sample(&cfg, &raw, 1, 5), render_content(1, 5, 3, 16, 16, cfg.noise, cfg.tint_jitter));
    }

    #[test]
    fn labels_are_balanced() {
        let data = generate(&small(), 1).unwrap();
        for c in 0..5 {
            assert_eq!(data.train.labels.iter().filter(|&&l| l == c).count(), 4 * 4);
        }
    }

    #[test]
    fn default_split_sizes() {
        let data = generate(&small(), 2).unwrap();
        let (shards, target) = split_leave_one_domain_out(&data.train, 3, 3).unwrap();
        assert_eq!(shards.iter().map(|s| s.domain).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(target.len(), 20);
        assert!(matches!(split_leave_one_domain_out(&data.train, 9, 3), Err(Error::Input(_))));
        assert!(split_leave_one_domain_out(&data.train, 0, 2).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let data = generate(&small(), 3).unwrap();
        let bytes = data.test.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), data.test);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn sampler_wraps_small_shards() {
        let mut s = BatchSampler::new(3, 1).unwrap();
        let b = s.next_batch(8);
        assert_eq!(b.len(), 8);
        let mut first: Vec<usize> = b[..3].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2]);
    }
}
