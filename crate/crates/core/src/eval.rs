//! Edit-quality metrics and the per-record metric report.

use std::fmt::Write as _;

use regionedit_tensor::{ParamStore, Session};

use crate::data::DatasetRecord;
use crate::error::{EditError, Result};
use crate::image::{Image, Rect};
use crate::model::EditModel;
use crate::vision::PatchEncoder;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(EditError::config(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let total: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(total / a.data.len() as f64)
}

/// Mean squared difference over all pixels and channels.
pub fn l2(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let total: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(total / a.data.len() as f64)
}

/// Mean absolute difference restricted to pixels outside `edit_box`.
/// Zero when the box covers the whole image.
pub fn masked_l1(a: &Image, b: &Image, edit_box: &Rect) -> Result<f64> {
    check_same(a, b)?;
    let (mut total, mut count) = (0.0f64, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            if edit_box.contains(y, x) {
                continue;
            }
            let (pa, pb) = (a.pixel(y, x), b.pixel(y, x));
            total += pa.iter().zip(&pb).map(|(p, q)| (p - q).abs() as f64).sum::<f64>();
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Cosine similarity of the flattened features of a frozen patch encoder.
pub fn embed_cosine(encoder: &PatchEncoder, store: &ParamStore<f32>, a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let feats = |img: &Image| -> Result<Vec<f64>> {
        let s = Session::new(store);
        let f = encoder.forward(&s, img)?;
        Ok(s.value(f.tokens).data().iter().map(|&v| v as f64).collect())
    };
    let (fa, fb) = (feats(a)?, feats(b)?);
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(if na == nb { 1.0 } else { 0.0 });
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordMetrics {
    pub l1: f64,
    pub l2: f64,
    pub cosine: f64,
    pub masked_l1: f64,
    /// Fraction of `[IMG]` slots decoded correctly by greedy decoding.
    pub slot_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub records: Vec<RecordMetrics>,
}

impl MetricReport {
    pub fn mean(&self) -> RecordMetrics {
        let n = self.records.len().max(1) as f64;
        let avg = |f: fn(&RecordMetrics) -> f64| self.records.iter().map(f).sum::<f64>() / n;
        RecordMetrics {
            l1: avg(|r| r.l1),
            l2: avg(|r| r.l2),
            cosine: avg(|r| r.cosine),
            masked_l1: avg(|r| r.masked_l1),
            slot_accuracy: avg(|r| r.slot_accuracy),
        }
    }

    /// Plain-text report: one line per record, then the means.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let line = |out: &mut String, label: &str, m: &RecordMetrics| {
            writeln!(
                out,
                "{label} l1={:.8} l2={:.8} cosine={:.8} masked_l1={:.8} slot_acc={:.4}",
                m.l1, m.l2, m.cosine, m.masked_l1, m.slot_accuracy
            )
            .unwrap();
        };
        for (i, r) in self.records.iter().enumerate() {
            line(&mut out, &format!("record={i}"), r);
        }
        line(&mut out, "mean", &self.mean());
        out
    }
}

/// Sampling settings for evaluation.
#[derive(Clone, Copy, Debug)]
pub struct SampleSettings {
    pub s_img: f64,
    pub s_txt: f64,
    pub steps: usize,
    pub seed: u64,
}

impl SampleSettings {
    pub fn from_config(cfg: &crate::RunConfig) -> Self {
        Self { s_img: cfg.s_img, s_txt: cfg.s_txt, steps: cfg.sample_steps, seed: cfg.seed }
    }
}

/// Samples an edit for every record and scores it against the target.
pub fn evaluate(
    model: &EditModel,
    store: &ParamStore<f32>,
    records: &[DatasetRecord],
    settings: SampleSettings,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        model.check_image(&rec.source)?;
        model.check_image(&rec.target)?;
        let seed = settings.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let edited = model.sample(
            store,
            &rec.source,
            &rec.instruction,
            &rec.boxes,
            settings.s_img,
            settings.s_txt,
            settings.steps,
            seed,
        )?;
        let decoded = {
            let s = Session::new(store);
            model.greedy_slots(&s, rec)?
        };
        let correct = decoded.iter().enumerate().filter(|&(j, &id)| id == model.vlm.img_token(j)).count();
        rows.push(RecordMetrics {
            l1: l1(&edited, &rec.target)?,
            l2: l2(&edited, &rec.target)?,
            cosine: embed_cosine(&model.vision.patches, store, &edited, &rec.target)?,
            masked_l1: masked_l1(&edited, &rec.target, &rec.edit_box)?,
            slot_accuracy: correct as f64 / model.cfg.img_tokens as f64,
        });
    }
    Ok(MetricReport { records: rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn identical_images_score_perfectly() {
        let cfg = RunConfig::default();
        let (model, store) = EditModel::new(&cfg).unwrap();
        let mut img = Image::filled(16, 16, [0.5; 3]);
        img.fill_rect(&Rect::new(2, 2, 7, 9), [0.9, 0.1, 0.1]);
        assert_eq!(l1(&img, &img).unwrap(), 0.0);
        assert_eq!(l2(&img, &img).unwrap(), 0.0);
        let c = embed_cosine(&model.vision.patches, &store, &img, &img).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_versus_white_is_one() {
        let black = Image::filled(4, 4, [0.0; 3]);
        let white = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(l1(&black, &white).unwrap(), 1.0);
        assert_eq!(l2(&black, &white).unwrap(), 1.0);
    }

    #[test]
    fn masked_l1_ignores_the_box() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let mut b = a.clone();
        b.fill_rect(&Rect::new(1, 1, 3, 3), [1.0; 3]);
        assert_eq!(masked_l1(&a, &b, &Rect::new(1, 1, 3, 3)).unwrap(), 0.0);
        assert!((masked_l1(&a, &b, &Rect::new(0, 0, 1, 1)).unwrap() - 4.0 / 15.0).abs() < 1e-12);
        assert!(l1(&a, &Image::filled(3, 4, [0.0; 3])).is_err());
    }
}
