//! Background and Other synthesis, map fusion and per-pixel labelling.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::capsule;
use crate::data;
use crate::decoder::{self, Threshold};
use crate::error::{Error, Result};
use crate::kernels::{self, gaussian_blur2d};
use crate::mask::LabelMask;
use crate::model::CapsNetParams;
use crate::saliency::{self, SmoothGradConfig};
use crate::taxonomy::{self, Mode, BACKGROUND, CLASSES, OTHER};
use crate::tensor::Tensor;

/// `0.75 / (1 + exp(−4·(Ī − 240)))` with `Ī` the per-pixel RGB mean on the
/// 0–255 scale; `image` is `[3, H, W]` in `[0, 1]`.
pub fn background_base(image: &Tensor) -> Result<Tensor> {
    image.expect_rank(3, "background_base")?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    Ok(Tensor::from_fn(vec![h, w], |p| {
        let mean = (0..c).map(|k| d[k * h * w + p] as f64).sum::<f64>() / c as f64 * 255.0;
        background_from_intensity(mean as f32)
    }))
}

/// The scaled-and-shifted sigmoid of one mean intensity (0–255).
pub fn background_from_intensity(mean: f32) -> f32 {
    0.75 * kernels::sigmoid(4.0 * (mean - 240.0))
}

fn check_aligned(base: &Tensor, maps: &[&Tensor], op: &'static str) -> Result<()> {
    base.expect_rank(2, op)?;
    maps.iter().try_for_each(|m| base.expect_same_shape(m, op))
}

/// Pixelwise maximum of `maps`; zeros when there are none.
pub fn pixel_max(shape: &[usize], maps: &[&Tensor]) -> Result<Tensor> {
    let mut out = Tensor::zeros(shape.to_vec());
    for m in maps {
        out = out.zip_map(m, "pixel_max", f32::max)?;
    }
    Ok(out)
}

/// `blur(max(0, base − max(maps)), sigma)`.
pub fn suppress(base: &Tensor, maps: &[&Tensor], sigma: f32) -> Result<Tensor> {
    check_aligned(base, maps, "suppress")?;
    let m = pixel_max(base.shape(), maps)?;
    let diff = base.zip_map(&m, "suppress", |b, m| (b - m).max(0.0))?;
    gaussian_blur2d(&diff, sigma)
}

/// Background for morphological mode, suppressed by the white-adipose map(s).
pub fn background_morph(base: &Tensor, adipose: &[&Tensor], sigma: f32) -> Result<Tensor> {
    suppress(base, adipose, sigma)
}

/// Background for functional mode, suppressed by the G.O, G.N and T maps.
pub fn background_func(base: &Tensor, transparent: &[&Tensor], sigma: f32) -> Result<Tensor> {
    suppress(base, transparent, sigma)
}

/// `0.05 · (1 − max(functional maps, functional background, adipose))`.
pub fn other_activation(functional: &[&Tensor], background_func: &Tensor, adipose: Option<&Tensor>) -> Result<Tensor> {
    let mut maps: Vec<&Tensor> = functional.to_vec();
    maps.push(background_func);
    maps.extend(adipose);
    check_aligned(background_func, &maps, "other_activation")?;
    let m = pixel_max(background_func.shape(), &maps)?;
    Ok(m.map(|v| 0.05 * (1.0 - v)))
}

/// Channel mean of a `[C, H, W]` map.
pub fn grayscale(map: &Tensor) -> Result<Tensor> {
    map.expect_rank(3, "grayscale")?;
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let d = map.data();
    Ok(Tensor::from_fn(vec![h, w], |p| {
        ((0..c).map(|k| d[k * h * w + p] as f64).sum::<f64>() / c as f64) as f32
    }))
}

/// `M^rec ⊙ M^smooth ⊙ (1 − background)`.
pub fn fuse(rec: &Tensor, smooth: &Tensor, background: &Tensor) -> Result<Tensor> {
    let pre = rec.hadamard(smooth)?;
    pre.zip_map(background, "fuse", |p, b| p * (1.0 - b))
}

/// Per-pixel argmax over `(label, map)` candidates; ties go to the lowest label.
pub fn segment(candidates: &[(usize, &Tensor)]) -> Result<LabelMask> {
    let Some(first) = candidates.first() else {
        return Err(Error::invalid("segment", "no candidate maps"));
    };
    first.1.expect_rank(2, "segment")?;
    for (_, m) in candidates {
        first.1.expect_same_shape(m, "segment")?;
    }
    let mut order: Vec<&(usize, &Tensor)> = candidates.iter().collect();
    order.sort_by_key(|(l, _)| *l);
    let (h, w) = (first.1.shape()[0], first.1.shape()[1]);
    let mut out = vec![0u8; h * w];
    for (p, o) in out.iter_mut().enumerate() {
        let mut best = (order[0].0, order[0].1.data()[p]);
        for (l, m) in &order[1..] {
            let v = m.data()[p];
            if v > best.1 {
                best = (*l, v);
            }
        }
        *o = best.0 as u8;
    }
    LabelMask::new(h, w, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threshold: f32,
    /// Gaussian σ (pixels) for the background masks.
    pub blur_sigma: f32,
    pub smoothgrad: SmoothGradConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            blur_sigma: 2.0,
            smoothgrad: SmoothGradConfig::default(),
        }
    }
}

/// Per-label maps used by the pipeline.
#[derive(Clone, Debug)]
pub struct LabelMaps {
    pub label: usize,
    /// Grayscale reconstruction `[H, W]`.
    pub rec: Tensor,
    pub smooth: Tensor,
    /// `rec ⊙ smooth`, before background removal.
    pub pre: Tensor,
}

#[derive(Clone, Debug)]
pub struct ActivationMaps {
    pub mode: Mode,
    pub scores: Tensor,
    /// Detected classes of the active mode.
    pub detected: Vec<usize>,
    pub labels: Vec<LabelMaps>,
    pub background_base: Tensor,
    pub background_morph: Tensor,
    pub background_func: Tensor,
    pub other: Option<Tensor>,
    /// `(label, M^F)` for detected classes.
    pub fused: Vec<(usize, Tensor)>,
    pub mask: LabelMask,
}

impl ActivationMaps {
    fn pre(&self, label: usize) -> Option<&Tensor> {
        self.labels.iter().find(|m| m.label == label).map(|m| &m.pre)
    }

    /// Background map of the active mode.
    pub fn background(&self) -> &Tensor {
        match self.mode {
            Mode::Morphological => &self.background_morph,
            Mode::Functional => &self.background_func,
        }
    }
}

/// Classify, reconstruct, explain and label every pixel of one image.
pub fn run_pipeline(
    params: &CapsNetParams,
    image: &Tensor,
    mode: Mode,
    cfg: &PipelineConfig,
) -> Result<ActivationMaps> {
    let (scores, caps, _) = capsule::forward_classify(image, params)?;
    let active = decoder::select_active_labels(&scores, &Threshold::Global(cfg.threshold))?;
    let d = taxonomy::designated();
    let detected: Vec<usize> = active.iter().copied().filter(|&j| CLASSES[j].mode == mode).collect();
    // classes whose maps feed the background and Other constructions
    let aux: &[usize] = match mode {
        Mode::Morphological => &[d.white_adipose],
        Mode::Functional => &[d.exocrine, d.endocrine, d.transport, d.adipose],
    };
    let mut needed = detected.clone();
    needed.extend(
        aux.iter()
            .copied()
            .filter(|j| active.contains(j) && !detected.contains(j)),
    );
    needed.sort_unstable();

    let smooth = saliency::smoothgrad_multi(params, image, &needed, &cfg.smoothgrad)?;
    let mut labels = Vec::with_capacity(needed.len());
    for (&j, sm) in needed.iter().zip(smooth) {
        let rec = grayscale(&decoder::decode_label(&caps.v, j, params)?)?;
        let pre = rec.hadamard(&sm)?;
        labels.push(LabelMaps {
            label: j,
            rec,
            smooth: sm,
            pre,
        });
    }
    let base = background_base(image)?;
    let mut maps = ActivationMaps {
        mode,
        scores,
        detected,
        labels,
        background_morph: Tensor::zeros(base.shape().to_vec()),
        background_func: Tensor::zeros(base.shape().to_vec()),
        background_base: base,
        other: None,
        fused: Vec::new(),
        mask: LabelMask::filled(1, 1, 0)?,
    };
    let pick =
        |m: &ActivationMaps, js: &[usize]| -> Vec<Tensor> { js.iter().filter_map(|&j| m.pre(j).cloned()).collect() };
    let adipose_w = pick(&maps, &[d.white_adipose]);
    maps.background_morph = background_morph(
        &maps.background_base,
        &adipose_w.iter().collect::<Vec<_>>(),
        cfg.blur_sigma,
    )?;
    let transparent = pick(&maps, &[d.exocrine, d.endocrine, d.transport]);
    maps.background_func = background_func(
        &maps.background_base,
        &transparent.iter().collect::<Vec<_>>(),
        cfg.blur_sigma,
    )?;
    if mode == Mode::Functional {
        let functional: Vec<Tensor> = pick(&maps, &taxonomy::classes_in(Mode::Functional));
        let adipose = maps.pre(d.adipose).cloned();
        maps.other = Some(other_activation(
            &functional.iter().collect::<Vec<_>>(),
            &maps.background_func,
            adipose.as_ref(),
        )?);
    }
    let bg = maps.background().clone();
    maps.fused = maps
        .detected
        .iter()
        .map(|&j| {
            let m = maps.labels.iter().find(|m| m.label == j).expect("detected maps exist");
            Ok((j, fuse(&m.rec, &m.smooth, &bg)?))
        })
        .collect::<Result<_>>()?;
    let mut candidates: Vec<(usize, &Tensor)> = maps.fused.iter().map(|(j, m)| (*j, m)).collect();
    candidates.push((BACKGROUND, &bg));
    if let Some(o) = &maps.other {
        candidates.push((OTHER, o));
    }
    maps.mask = segment(&candidates)?;
    Ok(maps)
}

/// Color-coded mask using the taxonomy palette.
pub fn colorize(mask: &LabelMask) -> Result<RgbImage> {
    let mut img = ImageBuffer::new(mask.width() as u32, mask.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        *px = Rgb(taxonomy::color_of(mask.data()[i] as usize)?);
    }
    Ok(img)
}

/// `code,mode,r,g,b` for every label of `mode`.
pub fn write_legend(path: &Path, mode: Mode) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("index,code,mode,r,g,b\n");
    for l in taxonomy::mask_universe(mode) {
        let [r, g, b] = taxonomy::color_of(l)?;
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l,
            taxonomy::code_of(l)?,
            taxonomy::mode_tag(l),
            r,
            g,
            b
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the per-class maps, the label mask and its colored rendering under
/// `dir` using `stem` as the file prefix.
pub fn write_outputs(dir: &Path, stem: &str, maps: &ActivationMaps) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (j, m) in &maps.fused {
        let code = CLASSES[*j].code;
        data::write_map_png(&dir.join(format!("{}_fused_{}.png", stem, code)), m)?;
        if let Some(l) = maps.labels.iter().find(|l| l.label == *j) {
            data::write_map_png(&dir.join(format!("{}_rec_{}.png", stem, code)), &l.rec)?;
            data::write_map_png(&dir.join(format!("{}_smooth_{}.png", stem, code)), &l.smooth)?;
        }
    }
    data::write_map_png(&dir.join(format!("{}_background.png", stem)), maps.background())?;
    if let Some(o) = &maps.other {
        data::write_map_png(&dir.join(format!("{}_other.png", stem)), o)?;
    }
    data::write_mask_png(&dir.join(format!("{}_mask.png", stem)), &maps.mask)?;
    data::write_png_rgb(&dir.join(format!("{}_color.png", stem)), &colorize(&maps.mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_sigmoid_fixture() {
        assert!((background_from_intensity(240.0) - 0.375).abs() < 1e-6);
        assert!((background_from_intensity(255.0) - 0.75).abs() < 1e-6);
        assert!(background_from_intensity(0.0) < 1e-20);
        let white = Tensor::ones(vec![3, 2, 2]);
        assert!(background_base(&white)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn other_from_zero_maps_is_constant() {
        let z = Tensor::zeros(vec![3, 3]);
        let o = other_activation(&[&z, &z], &z, Some(&z)).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.05));
        let half = Tensor::full(vec![3, 3], 0.5);
        let o = other_activation(&[&half], &z, None).unwrap();
        assert!(o.data().iter().all(|&v| (v - 0.025).abs() < 1e-9));
    }

    #[test]
    fn full_suppression_clamps_to_zero() {
        let base = Tensor::full(vec![4, 4], 0.6);
        let over = Tensor::full(vec![4, 4], 0.9);
        assert_eq!(suppress(&base, &[&over], 2.0).unwrap(), Tensor::zeros(vec![4, 4]));
        let none = suppress(&base, &[], 2.0).unwrap();
        assert!(none.data().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn segment_ties_and_errors() {
        let a = Tensor::full(vec![2, 2], 0.5);
        let b = Tensor::full(vec![2, 2], 0.5);
        let m = segment(&[(7, &a), (3, &b)]).unwrap();
        assert!(m.data().iter().all(|&l| l == 3));
        assert!(segment(&[]).is_err());
    }
}
