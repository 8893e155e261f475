//! Visual front end: the frozen patch encoder, region proposals and
//! ROI-aligned region tokens, the dual-resolution hybrid encoder, and the
//! fixed orthogonal latent codec used by the diffusion branch.

use regionedit_tensor::{ParamId, Scalar, Session, Tensor, Var};

use crate::config::{DetectMode, RunConfig};
use crate::error::{EditError, Result};
use crate::image::{Image, Rect, RegionSet, RegionSource};
use crate::nn::{sinusoid_row, Builder, Linear};

/// Token grid produced by a patch encoder.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// `[grid_h · grid_w, width]`, row-major over the grid.
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
}

fn check_divisible(image: &Image, by: usize, what: &str) -> Result<()> {
    if by == 0 || !image.height.is_multiple_of(by) || !image.width.is_multiple_of(by) {
        return Err(EditError::contract(format!(
            "{}x{} image is not divisible by the {what} {by}",
            image.height, image.width
        )));
    }
    Ok(())
}

/// Non-overlapping patches, linear projection, learned 2-D positions.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub patch: usize,
    pub proj: Linear,
    pub pos: ParamId,
    pub grid: (usize, usize),
}

impl PatchEncoder {
    pub fn new(
        b: &mut Builder,
        name: &str,
        image_size: usize,
        patch: usize,
        width: usize,
        trainable: bool,
    ) -> Result<Self> {
        let g = image_size / patch;
        b.scope(name, |b| {
            Ok(Self {
                patch,
                proj: Linear::new(b, "proj", patch * patch * 3, width, trainable)?,
                pos: b.normal("pos", &[g * g, width], 0.5, trainable)?,
                grid: (g, g),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, image: &Image) -> Result<FeatureMap> {
        check_divisible(image, self.patch, "patch size")?;
        let (gh, gw) = (image.height / self.patch, image.width / self.patch);
        if (gh, gw) != self.grid {
            return Err(EditError::contract(format!(
                "patch encoder built for a {:?} grid, image gives {gh}x{gw}",
                self.grid
            )));
        }
        let x = s.constant(image.to_tensor().cast());
        let cols = s.im2col(x, self.patch, self.patch, 0)?;
        let tokens = self.proj.forward(s, cols)?;
        let tokens = s.add(tokens, s.param(self.pos))?;
        Ok(FeatureMap { tokens, grid_h: gh, grid_w: gw, patch: self.patch })
    }
}

/// Region proposals: oracle passthrough or a fixed k×k tiling.
pub fn detect(image: &Image, mode: DetectMode, oracle: Option<&RegionSet>, k: usize) -> Result<RegionSet> {
    match mode {
        DetectMode::Oracle => {
            let boxes = oracle.ok_or_else(|| EditError::contract("oracle detection needs oracle boxes"))?;
            Ok(boxes.clone())
        }
        DetectMode::Grid => {
            if k == 0 || k > image.height || k > image.width {
                return Err(EditError::contract(format!("grid k={k} for a {}x{} image", image.height, image.width)));
            }
            let mut boxes = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    boxes.push(Rect::new(
                        j * image.width / k,
                        i * image.height / k,
                        (j + 1) * image.width / k,
                        (i + 1) * image.height / k,
                    ));
                }
            }
            Ok(RegionSet { boxes, source: RegionSource::Grid })
        }
    }
}

/// Bilinear weights of feature-grid cells for a sample at pixel `(y, x)`.
/// Cell centres sit at `(j + 0.5)·patch`; samples clamp to the grid.
pub fn bilinear_taps(y: f64, x: f64, map: &FeatureMap) -> Vec<(usize, f64)> {
    let p = map.patch as f64;
    let fy = (y / p - 0.5).clamp(0.0, (map.grid_h - 1) as f64);
    let fx = (x / p - 0.5).clamp(0.0, (map.grid_w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(map.grid_h - 1), (x0 + 1).min(map.grid_w - 1));
    let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (cy, wy) in [(y0, 1.0 - wy), (y1, wy)] {
        for (cx, wx) in [(x0, 1.0 - wx), (x1, wx)] {
            let w = wy * wx;
            if w == 0.0 {
                continue;
            }
            let idx = cy * map.grid_w + cx;
            match taps.iter_mut().find(|(i, _)| *i == idx) {
                Some(t) => t.1 += w,
                None => taps.push((idx, w)),
            }
        }
    }
    taps
}

/// ROI-align: one bilinear sample per pooled cell centre, giving
/// `[boxes · q · q, width]` rows in canonical box order, cells row-major.
pub fn roi_align<T: Scalar>(s: &Session<T>, map: &FeatureMap, boxes: &[Rect], q: usize) -> Result<Var> {
    let (h, w) = (map.grid_h * map.patch, map.grid_w * map.patch);
    let mut rows = Vec::with_capacity(boxes.len() * q * q);
    for r in boxes {
        r.check(h, w)?;
        let (bh, bw) = ((r.y1 - r.y0) as f64, (r.x1 - r.x0) as f64);
        for cy in 0..q {
            for cx in 0..q {
                let y = r.y0 as f64 + (cy as f64 + 0.5) * bh / q as f64;
                let x = r.x0 as f64 + (cx as f64 + 0.5) * bw / q as f64;
                rows.push(
                    bilinear_taps(y, x, map)
                        .into_iter()
                        .map(|(i, wt)| (i, T::from_f64(wt)))
                        .collect(),
                );
            }
        }
    }
    Ok(s.weighted_gather(map.tokens, rows)?)
}

/// Region tokens: ROI-align each canonical box to `q×q`, flatten, project.
#[derive(Clone, Debug)]
pub struct RegionEncoder {
    pub pool: usize,
    pub proj: Linear,
    pub pos_code: bool,
}

impl RegionEncoder {
    pub fn new(b: &mut Builder, name: &str, feature_width: usize, pool: usize, d: usize, pos_code: bool) -> Result<Self> {
        Ok(Self {
            pool,
            proj: Linear::new(b, &format!("{name}.proj"), pool * pool * feature_width, d, true)?,
            pos_code,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, map: &FeatureMap, regions: &RegionSet) -> Result<Var> {
        let boxes = regions.canonical();
        let d_v = s.shape(map.tokens)[1];
        let q2 = self.pool * self.pool;
        let pooled = roi_align(s, map, &boxes, self.pool)?;
        let flat = s.reshape(pooled, &[boxes.len(), q2 * d_v])?;
        let tokens = self.proj.forward(s, flat)?;
        if !self.pos_code || boxes.is_empty() {
            return Ok(tokens);
        }
        let d = self.proj.d_out;
        let code: Vec<f64> = boxes
            .iter()
            .flat_map(|r| {
                let (cx, cy) = r.center();
                let mut row = sinusoid_row(cx, d / 2);
                row.extend(sinusoid_row(cy, d - d / 2));
                row
            })
            .collect();
        let code = s.constant(Tensor::from_f64([boxes.len(), d], &code)?);
        Ok(s.add(tokens, code)?)
    }
}

/// Coarse (patch 2p) and fine (patch p) encoders with encoder-id tags,
/// concatenated coarse-first along the token axis.
#[derive(Clone, Debug)]
pub struct HybridEncoder {
    pub coarse: PatchEncoder,
    pub fine: PatchEncoder,
    pub coarse_id: ParamId,
    pub fine_id: ParamId,
}

impl HybridEncoder {
    pub fn new(b: &mut Builder, name: &str, image_size: usize, patch: usize, width: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                coarse: PatchEncoder::new(b, "coarse", image_size, 2 * patch, width, true)?,
                fine: PatchEncoder::new(b, "fine", image_size, patch, width, true)?,
                coarse_id: b.normal("coarse_id", &[width], 0.5, true)?,
                fine_id: b.normal("fine_id", &[width], 0.5, true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, image: &Image) -> Result<Var> {
        let (coarse, fine) = self.parts(s, image)?;
        Ok(s.concat(&[coarse, fine], 0)?)
    }

    /// The tagged coarse and fine token blocks separately.
    pub fn parts<T: Scalar>(&self, s: &Session<T>, image: &Image) -> Result<(Var, Var)> {
        let c = self.coarse.forward(s, image)?;
        let f = self.fine.forward(s, image)?;
        let c = s.add(c.tokens, s.param(self.coarse_id))?;
        let f = s.add(f.tokens, s.param(self.fine_id))?;
        Ok((c, f))
    }
}

/// Every encoder on the image side of the model.
#[derive(Clone, Debug)]
pub struct VisionStack {
    pub patches: PatchEncoder,
    pub regions: RegionEncoder,
    pub hybrid: HybridEncoder,
}

impl VisionStack {
    pub fn new(b: &mut Builder, cfg: &RunConfig) -> Result<Self> {
        b.scope("vision", |b| {
            Ok(Self {
                // the holistic encoder stands in for a pretrained backbone
                patches: PatchEncoder::new(b, "patch", cfg.image_size, cfg.patch, cfg.vision_width, false)?,
                regions: RegionEncoder::new(
                    b,
                    "region",
                    cfg.vision_width,
                    cfg.region_pool,
                    cfg.vlm_width,
                    cfg.region_pos_code,
                )?,
                hybrid: HybridEncoder::new(b, "hybrid", cfg.image_size, cfg.patch, cfg.hybrid_width)?,
            })
        })
    }
}

/// Orthonormal DCT-II matrix, row `k` is the k-th basis vector.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = scale * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// Space-to-depth by `factor` followed by a fixed orthogonal mixing of the
/// `factor²·3` channels. Decoding is the exact transpose.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub factor: usize,
    mix: Vec<f64>,
}

impl LatentCodec {
    pub fn new(factor: usize) -> Self {
        let c = factor * factor * 3;
        Self { factor, mix: dct_matrix(c) }
    }

    pub fn channels(&self) -> usize {
        self.factor * self.factor * 3
    }

    /// `[H, W, 3] → [H/f, W/f, f²·3]`.
    pub fn encode<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = match x.shape() {
            &[h, w, 3] => (h, w),
            s => return Err(EditError::contract(format!("codec input must be [H, W, 3], got {s:?}"))),
        };
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(EditError::contract(format!("{h}x{w} image not divisible by latent factor {f}")));
        }
        let c = self.channels();
        let (lh, lw) = (h / f, w / f);
        let src = x.data();
        let mut out = vec![T::zero(); lh * lw * c];
        let mut cell = vec![0.0f64; c];
        for ly in 0..lh {
            for lx in 0..lw {
                for dy in 0..f {
                    for dx in 0..f {
                        let p = ((ly * f + dy) * w + lx * f + dx) * 3;
                        for ch in 0..3 {
                            cell[(dy * f + dx) * 3 + ch] = src[p + ch].as_f64();
                        }
                    }
                }
                let dst = &mut out[(ly * lw + lx) * c..(ly * lw + lx + 1) * c];
                for (k, d) in dst.iter_mut().enumerate() {
                    let row = &self.mix[k * c..(k + 1) * c];
                    *d = T::from_f64(row.iter().zip(&cell).map(|(a, b)| a * b).sum());
                }
            }
        }
        Ok(Tensor::new([lh, lw, c], out)?)
    }

    /// `[H/f, W/f, f²·3] → [H, W, 3]`.
    pub fn decode<T: Scalar>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.channels();
        let (lh, lw) = match z.shape() {
            &[lh, lw, cc] if cc == c => (lh, lw),
            s => return Err(EditError::contract(format!("latent must be [h, w, {c}], got {s:?}"))),
        };
        let f = self.factor;
        let (h, w) = (lh * f, lw * f);
        let src = z.data();
        let mut out = vec![T::zero(); h * w * 3];
        for ly in 0..lh {
            for lx in 0..lw {
                let zc = &src[(ly * lw + lx) * c..(ly * lw + lx + 1) * c];
                for i in 0..c {
                    let v: f64 = (0..c).map(|k| self.mix[k * c + i] * zc[k].as_f64()).sum();
                    let (dy, dx, ch) = (i / 3 / f, i / 3 % f, i % 3);
                    out[((ly * f + dy) * w + lx * f + dx) * 3 + ch] = T::from_f64(v);
                }
            }
        }
        Ok(Tensor::new([h, w, 3], out)?)
    }

    /// Latent of an image mapped to `[-1, 1]` first.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<f32>> {
        let t = image.to_tensor().map(|v| 2.0 * v - 1.0);
        self.encode(&t)
    }

    /// Inverse of [`encode_image`](Self::encode_image), clipped to `[0, 1]`.
    pub fn decode_image(&self, z: &Tensor<f32>) -> Result<Image> {
        let x = self.decode(z)?.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
        Image::from_tensor(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use regionedit_tensor::ParamStore;

    fn map_of(values: &[f64], gh: usize, gw: usize, width: usize, patch: usize, s: &Session<f64>) -> FeatureMap {
        let tokens = s.constant(Tensor::new([gh * gw, width], values.to_vec()).unwrap());
        FeatureMap { tokens, grid_h: gh, grid_w: gw, patch }
    }

    #[test]
    fn patch_grid_shape() {
        let mut b = Builder::new(0);
        let enc = PatchEncoder::new(&mut b, "p", 8, 4, 5, true).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let img = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        let f = enc.forward(&s, &img).unwrap();
        assert_eq!((f.grid_h, f.grid_w), (2, 2));
        assert_eq!(s.shape(f.tokens), vec![4, 5]);
        let odd = Image::filled(6, 6, [0.0; 3]);
        assert!(enc.forward(&s, &odd).is_err());
    }

    #[test]
    fn zero_image_gives_positional_embeddings_only() {
        let mut b = Builder::new(3);
        let enc = PatchEncoder::new(&mut b, "p", 8, 4, 5, true).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let f = enc.forward(&s, &Image::filled(8, 8, [0.0; 3])).unwrap();
        assert!(s.value(f.tokens).bit_eq(&store.get(enc.pos).tensor()));
    }

    #[test]
    fn grid_detection_tiles_the_image() {
        let img = Image::filled(16, 16, [0.5; 3]);
        let set = detect(&img, DetectMode::Grid, None, 2).unwrap();
        assert_eq!(set.boxes.len(), 4);
        assert!(set.boxes.iter().all(|r| r.area() == 64));
        let one = detect(&img, DetectMode::Grid, None, 1).unwrap();
        assert_eq!(one.boxes, vec![Rect::new(0, 0, 16, 16)]);
        assert!(detect(&img, DetectMode::Oracle, None, 2).is_err());
        let given = RegionSet::oracle(vec![Rect::new(3, 3, 5, 9), Rect::new(0, 0, 2, 2)]);
        assert_eq!(detect(&img, DetectMode::Oracle, Some(&given), 2).unwrap(), given);
    }

    #[test]
    fn roi_align_full_box_average() {
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let map = map_of(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1, 2, &s);
        let pooled = s.value(roi_align(&s, &map, &[Rect::new(0, 0, 4, 4)], 1).unwrap());
        assert!((pooled.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn roi_align_of_constant_map_is_constant() {
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let map = map_of(&[0.75; 16 * 2], 4, 4, 2, 2, &s);
        for r in [Rect::new(0, 0, 8, 8), Rect::new(1, 3, 4, 4), Rect::new(7, 0, 8, 1)] {
            let pooled = s.value(roi_align(&s, &map, &[r], 2).unwrap());
            assert!(pooled.data().iter().all(|&v| (v - 0.75).abs() < 1e-12), "{r:?}");
        }
        assert!(roi_align(&s, &map, &[Rect::new(0, 0, 9, 8)], 2).is_err());
    }

    #[test]
    fn empty_region_set_gives_zero_rows() {
        let mut b = Builder::new(0);
        let cfg = RunConfig::default();
        let vision = VisionStack::new(&mut b, &cfg).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let img = Image::filled(16, 16, [0.5; 3]);
        let map = vision.patches.forward(&s, &img).unwrap();
        let p = vision.regions.forward(&s, &map, &RegionSet::empty()).unwrap();
        assert_eq!(s.shape(p), vec![0, cfg.vlm_width]);
    }

    #[test]
    fn hybrid_token_count() {
        let mut b = Builder::new(0);
        let enc = HybridEncoder::new(&mut b, "h", 8, 2, 4).unwrap();
        let store = b.finish();
        let s = Session::new(&store);
        let out = enc.forward(&s, &Image::filled(8, 8, [0.1, 0.2, 0.3])).unwrap();
        assert_eq!(s.shape(out), vec![20, 4]);
    }

    #[test]
    fn codec_shape_and_round_trip() {
        let codec = LatentCodec::new(2);
        let x = Tensor::<f64>::from_fn([8, 8, 3], |i| ((i * 7919) % 101) as f64 / 101.0);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[4, 4, 12]);
        let back = codec.decode(&z).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
        assert!((z.sum_of_squares() - x.sum_of_squares()).abs() < 1e-9);
        assert!(codec.encode(&Tensor::<f64>::zeros([6, 5, 3])).is_err());
    }
}
