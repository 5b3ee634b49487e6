//! StyleMix: synthesize paired night/day training data from daytime images.
//!
//! For each day image a [`MixPlan`] is sampled: a few augmentation chains,
//! each a short sequence of stylization operations that use references from a
//! [`StylePool`], and a set of convex fusion coefficients drawn from a
//! symmetric Dirichlet distribution. Running every chain on the day image and
//! fusing the branches with the coefficients gives one mixed night image. Two
//! independently sampled plans give the pair `(MN1, MN2)` whose pixel-aligned
//! target is the original day image.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::imaging::{clamp_to_unit, Image};
use crate::io::{list_images, read_image};
use crate::rng::{stream, sub_seed};

/// A stylization operator: render `content` in the look of `style`.
///
/// `style_index` is the position of `style` in its pool, which lets
/// file-backed implementations look up pre-rendered results.
pub trait Stylizer: Send + Sync {
    fn stylize(&self, content: &Image, style: &Image, style_index: usize) -> Result<Image>;
}

/// Orthonormal opponent-colour basis: luminance, red–green, yellow–blue.
const OPPONENT: [[f64; 3]; 3] = [
    [0.577_350_269_189_625_8, 0.577_350_269_189_625_8, 0.577_350_269_189_625_8],
    [0.707_106_781_186_547_5, -0.707_106_781_186_547_5, 0.0],
    [0.408_248_290_463_863, 0.408_248_290_463_863, -0.816_496_580_927_726],
];

/// Deterministic global colour-statistics transfer.
///
/// Pixels are rotated into an opponent colour basis, each axis is shifted and
/// scaled so its mean and standard deviation match the style image, and the
/// result is rotated back. Channels with zero variance in the content take the
/// style mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsStylizer;

/// Rotates an image into transfer space, as planar channels.
pub fn to_transfer_space(image: &Image) -> Vec<Vec<f64>> {
    let ch = image.channels();
    let n = image.height() * image.width();
    let mut planes = vec![Vec::with_capacity(n); ch];
    for px in image.data().chunks_exact(ch) {
        if ch == 3 {
            for (a, row) in OPPONENT.iter().enumerate() {
                planes[a].push(row[0] * px[0] + row[1] * px[1] + row[2] * px[2]);
            }
        } else {
            planes[0].push(px[0]);
        }
    }
    planes
}

fn from_transfer_space(planes: &[Vec<f64>], height: usize, width: usize) -> Image {
    let ch = planes.len();
    let mut data = Vec::with_capacity(height * width * ch);
    for p in 0..height * width {
        if ch == 3 {
            for c in 0..3 {
                data.push((0..3).map(|a| OPPONENT[a][c] * planes[a][p]).sum());
            }
        } else {
            data.push(planes[0][p]);
        }
    }
    Image::from_raw(height, width, ch, data)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Stylizer for StatsStylizer {
    fn stylize(&self, content: &Image, style: &Image, style_index: usize) -> Result<Image> {
        if content.channels() != style.channels() {
            return Err(arg_err!(
                "content has {} channels but style has {}",
                content.channels(),
                style.channels()
            ));
        }
        let mut planes = to_transfer_space(content);
        let style_planes = to_transfer_space(style);
        for (plane, style_plane) in planes.iter_mut().zip(&style_planes) {
            let (mc, sc) = mean_std(plane);
            let (ms, ss) = mean_std(style_plane);
            if sc <= 1e-12 {
                plane.iter_mut().for_each(|v| *v = ms);
            } else {
                let gain = ss / sc;
                plane.iter_mut().for_each(|v| *v = (*v - mc) * gain + ms);
            }
        }
        let mut out = from_transfer_space(&planes, content.height(), content.width());
        out.meta.id = content
            .meta
            .id
            .as_ref()
            .map(|id| format!("{id}__{style_index}"));
        Ok(out)
    }
}

/// Colour-statistics transfer with the built-in stylizer.
pub fn stylize(content: &Image, style: &Image) -> Result<Image> {
    StatsStylizer.stylize(content, style, 0)
}

/// Reads pre-rendered stylizations from `<dir>/<content_id>__<style_idx>.png`.
///
/// The output carries the id `<content_id>__<style_idx>`, so a second
/// stylization in a chain looks up `<content_id>__<s1>__<s2>.png`.
#[derive(Debug, Clone)]
pub struct FileStylizer {
    dir: PathBuf,
}

impl FileStylizer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Stylizer for FileStylizer {
    fn stylize(&self, content: &Image, _style: &Image, style_index: usize) -> Result<Image> {
        let id = content
            .meta
            .id
            .as_deref()
            .ok_or_else(|| arg_err!("pre-stylized lookup needs a content id"))?;
        let key = format!("{id}__{style_index}");
        let mut out = read_image(self.dir.join(format!("{key}.png")))?;
        if out.dims() != content.dims() {
            return Err(shape_err!(
                "pre-stylized {key} is {:?}, content is {:?}",
                out.dims(),
                content.dims()
            ));
        }
        out.meta.id = Some(key);
        Ok(out)
    }
}

/// Ordered style references; the order defines the style indices.
#[derive(Debug, Clone)]
pub struct StylePool {
    refs: Vec<Image>,
}

impl StylePool {
    pub fn new(refs: Vec<Image>) -> Result<Self> {
        if refs.is_empty() {
            return Err(arg_err!("style pool must hold at least one reference"));
        }
        Ok(Self { refs })
    }

    /// Loads every image in `dir`, in lexicographic file-name order.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let refs = list_images(dir.as_ref())?
            .into_iter()
            .map(read_image)
            .collect::<Result<Vec<_>>>()?;
        if refs.is_empty() {
            return Err(Error::Data(format!(
                "no style images in {}",
                dir.as_ref().display()
            )));
        }
        Self::new(refs)
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Image> {
        self.refs.get(index)
    }

    pub fn refs(&self) -> &[Image] {
        &self.refs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleMixConfig {
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Number of leading pool references that chains may draw from.
    pub pool_size: usize,
    pub chains: usize,
    pub max_chain_len: usize,
    pub seed: u64,
    /// Draw an independent coefficient vector for every pixel instead of one
    /// vector broadcast over the image.
    pub per_pixel_coeffs: bool,
}

impl Default for StyleMixConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            pool_size: 5,
            chains: 3,
            max_chain_len: 2,
            seed: 0,
            per_pixel_coeffs: false,
        }
    }
}

impl StyleMixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.chains == 0 || self.max_chain_len == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "chains, max_chain_len and pool_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A sampled recipe for one mixed night image.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    /// Style indices per chain, applied left to right.
    pub chains: Vec<Vec<usize>>,
    /// `chains × H × W` convex coefficients.
    pub coeffs: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl MixPlan {
    pub fn coeff(&self, m: usize, y: usize, x: usize) -> f64 {
        self.coeffs[(m * self.height + y) * self.width + x]
    }

    /// Checks the simplex constraint at every pixel.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let plane = self.height * self.width;
        for p in 0..plane {
            let mut sum = 0.0;
            for m in 0..self.chains.len() {
                let c = self.coeffs[m * plane + p];
                if c < 0.0 || !c.is_finite() {
                    return Err(Error::Numeric(format!("negative coefficient {c}")));
                }
                sum += c;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Numeric(format!("coefficients sum to {sum}")));
            }
        }
        Ok(())
    }
}

fn sample_dirichlet<R: Rng>(gamma: &Gamma<f64>, n: usize, rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        // Every gamma draw underflowed (tiny alpha): the limit is a vertex.
        let hot = rng.random_range(0..n);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = (i == hot) as u8 as f64);
    }
    draws
}

/// Samples chains and fusion coefficients for an `height×width` image.
pub fn sample_mix_plan(
    cfg: &StyleMixConfig,
    pool_len: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<MixPlan> {
    cfg.validate()?;
    if pool_len == 0 {
        return Err(arg_err!("style pool is empty"));
    }
    let usable = cfg.pool_size.min(pool_len);
    let mut rng = stream(seed);
    let chains = (0..cfg.chains)
        .map(|_| {
            let len = rng.random_range(1..=cfg.max_chain_len);
            (0..len).map(|_| rng.random_range(0..usable)).collect()
        })
        .collect::<Vec<Vec<usize>>>();

    let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let plane = height * width;
    let mut coeffs = vec![0.0; cfg.chains * plane];
    if cfg.per_pixel_coeffs {
        for p in 0..plane {
            for (m, c) in sample_dirichlet(&gamma, cfg.chains, &mut rng).into_iter().enumerate() {
                coeffs[m * plane + p] = c;
            }
        }
    } else {
        for (m, c) in sample_dirichlet(&gamma, cfg.chains, &mut rng).into_iter().enumerate() {
            coeffs[m * plane..(m + 1) * plane].fill(c);
        }
    }
    Ok(MixPlan {
        chains,
        coeffs,
        height,
        width,
        seed,
    })
}

/// Runs a chain of stylizations left to right. An empty chain returns the
/// content unchanged.
pub fn apply_chain(
    content: &Image,
    chain: &[usize],
    pool: &StylePool,
    stylizer: &dyn Stylizer,
) -> Result<Image> {
    let mut current = content.clone();
    for &idx in chain {
        let style = pool
            .get(idx)
            .ok_or_else(|| arg_err!("style index {idx} out of range for pool of {}", pool.len()))?;
        current = stylizer.stylize(&current, style, idx)?;
    }
    Ok(current)
}

/// Pixel-wise convex combination of the branch images.
pub fn fuse(plan: &MixPlan, branches: &[Image]) -> Result<Image> {
    if branches.len() != plan.chains.len() {
        return Err(shape_err!(
            "plan has {} chains but {} branch images were given",
            plan.chains.len(),
            branches.len()
        ));
    }
    let first = &branches[0];
    if first.height() != plan.height || first.width() != plan.width {
        return Err(shape_err!(
            "branches are {}x{}, coefficients are {}x{}",
            first.height(),
            first.width(),
            plan.height,
            plan.width
        ));
    }
    for b in &branches[1..] {
        first.ensure_same_shape(b, "fusion branches")?;
    }
    let (h, w, ch) = first.dims();
    let plane = h * w;
    let mut out = vec![0.0; h * w * ch];
    for (m, branch) in branches.iter().enumerate() {
        let coeffs = &plan.coeffs[m * plane..(m + 1) * plane];
        for (p, (dst, src)) in out
            .chunks_exact_mut(ch)
            .zip(branch.data().chunks_exact(ch))
            .enumerate()
        {
            for c in 0..ch {
                dst[c] += coeffs[p] * src[c];
            }
        }
    }
    Ok(Image::from_raw(h, w, ch, out))
}

/// Executes a plan on a content image.
pub fn render_plan(
    content: &Image,
    plan: &MixPlan,
    pool: &StylePool,
    stylizer: &dyn Stylizer,
) -> Result<Image> {
    let branches = plan
        .chains
        .iter()
        .map(|chain| apply_chain(content, chain, pool, stylizer))
        .collect::<Result<Vec<_>>>()?;
    fuse(plan, &branches)
}

/// Two mixed night renditions of one day image plus the pixel-aligned target.
#[derive(Debug, Clone)]
pub struct MixedPair {
    pub mn1: Image,
    pub mn2: Image,
    pub target: Image,
    pub plans: [MixPlan; 2],
}

/// Generates `(MN1, MN2, target)` for a day image. The two plans use
/// independent sub-seeds of `seed`. Mixed images are clamped to `[0, 1]`
/// since they stand in for photographs.
pub fn generate_pair(
    day: &Image,
    cfg: &StyleMixConfig,
    pool: &StylePool,
    stylizer: &dyn Stylizer,
    seed: u64,
) -> Result<MixedPair> {
    let (h, w) = (day.height(), day.width());
    let plan1 = sample_mix_plan(cfg, pool.len(), h, w, sub_seed(seed, 1))?;
    let plan2 = sample_mix_plan(cfg, pool.len(), h, w, sub_seed(seed, 2))?;
    let mn1 = clamp_to_unit(&render_plan(day, &plan1, pool, stylizer)?)?;
    let mn2 = clamp_to_unit(&render_plan(day, &plan2, pool, stylizer)?)?;
    Ok(MixedPair {
        mn1,
        mn2,
        target: day.clone(),
        plans: [plan1, plan2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, phase: f64) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| {
            (0.5 + 0.4 * ((y as f64 * 0.7 + x as f64 * 0.3 + c as f64 + phase).sin())).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn stylize_with_itself_is_identity() {
        let img = ramp(6, 7, 0.0);
        let out = stylize(&img, &img).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_content_takes_style_mean() {
        let gray = Image::filled(4, 4, 3, 0.5).unwrap();
        let blue = Image::from_fn(3, 5, 3, |_, _, c| [0.05, 0.08, 0.3][c]).unwrap();
        let out = stylize(&gray, &blue).unwrap();
        for px in out.data().chunks(3) {
            assert!((px[0] - 0.05).abs() < 1e-12);
            assert!((px[1] - 0.08).abs() < 1e-12);
            assert!((px[2] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_an_argument_error() {
        let a = Image::filled(2, 2, 3, 0.5).unwrap();
        let b = Image::filled(2, 2, 1, 0.5).unwrap();
        assert!(matches!(stylize(&a, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn chain_edge_cases() {
        let pool = StylePool::new(vec![ramp(5, 5, 1.0), ramp(5, 5, 2.0)]).unwrap();
        let content = ramp(5, 5, 0.0);
        let same = apply_chain(&content, &[], &pool, &StatsStylizer).unwrap();
        assert_eq!(same, content);
        let once = apply_chain(&content, &[1], &pool, &StatsStylizer).unwrap();
        assert_eq!(once.data(), stylize(&content, pool.get(1).unwrap()).unwrap().data());
        let twice = apply_chain(&content, &[1, 1], &pool, &StatsStylizer).unwrap();
        for (a, b) in twice.data().iter().zip(once.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(matches!(
            apply_chain(&content, &[2], &pool, &StatsStylizer),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn degenerate_pool_uses_index_zero() {
        let cfg = StyleMixConfig::default();
        for seed in 0..50 {
            let plan = sample_mix_plan(&cfg, 1, 2, 2, seed).unwrap();
            assert!(plan.chains.iter().flatten().all(|&i| i == 0));
        }
    }

    #[test]
    fn per_pixel_mode_varies_across_pixels() {
        let cfg = StyleMixConfig {
            per_pixel_coeffs: true,
            ..Default::default()
        };
        let plan = sample_mix_plan(&cfg, 5, 4, 4, 9).unwrap();
        plan.check_simplex(1e-9).unwrap();
        assert_ne!(plan.coeff(0, 0, 0), plan.coeff(0, 3, 3));
        let broadcast = sample_mix_plan(&StyleMixConfig::default(), 5, 4, 4, 9).unwrap();
        assert_eq!(broadcast.coeff(1, 0, 0), broadcast.coeff(1, 3, 2));
    }

    #[test]
    fn tiny_alpha_stays_on_simplex() {
        let cfg = StyleMixConfig {
            alpha: 1e-4,
            ..Default::default()
        };
        for seed in 0..20 {
            sample_mix_plan(&cfg, 5, 2, 2, seed).unwrap().check_simplex(1e-9).unwrap();
        }
        assert!(sample_mix_plan(&StyleMixConfig { alpha: 0.0, ..cfg }, 5, 2, 2, 0).is_err());
    }

    #[test]
    fn fuse_selects_single_branch() {
        let branches = [ramp(3, 4, 0.0), ramp(3, 4, 1.0), ramp(3, 4, 2.0)];
        let mut plan = sample_mix_plan(&StyleMixConfig::default(), 5, 3, 4, 0).unwrap();
        plan.coeffs.iter_mut().enumerate().for_each(|(i, c)| *c = (i < 12) as u8 as f64);
        assert_eq!(fuse(&plan, &branches).unwrap().data(), branches[0].data());
        assert!(fuse(&plan, &branches[..2]).is_err());
        let wrong = [ramp(3, 5, 0.0), ramp(3, 5, 1.0), ramp(3, 5, 2.0)];
        assert!(matches!(fuse(&plan, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn file_stylizer_reads_keyed_files() {
        let dir = tempfile::tempdir().unwrap();
        let styled = ramp(4, 4, 3.0);
        crate::io::write_image(&styled, dir.path().join("scene7__2.png")).unwrap();
        let content = ramp(4, 4, 0.0).with_id("scene7");
        let fs = FileStylizer::new(dir.path());
        let out = fs.stylize(&content, &content, 2).unwrap();
        assert_eq!(out.meta.id.as_deref(), Some("scene7__2"));
        assert!(fs.stylize(&content, &content, 3).is_err());
        assert!(fs.stylize(&ramp(4, 4, 0.0), &content, 2).is_err());
    }
}
