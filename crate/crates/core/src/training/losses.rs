use candle_core::{DType, Tensor, D};

use crate::error::{bail_config, bail_data, Result};
use crate::nn::{log_softmax_last, scalar_f64};
use crate::text::{TokenId, PAD};

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean of `-log_softmax(logits)[i, i]` over rows.
fn diagonal_ce(logits: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let logp = log_softmax_last(logits)?;
    let eye = Tensor::eye(b, logp.dtype(), logp.device())?;
    Ok((logp * eye)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

/// Symmetric InfoNCE over L2-normalized rows: the mean of image→text and
/// text→image cross-entropies with matching rows as targets.
pub fn contrastive_loss(image: &Tensor, text: &Tensor, temperature: &Tensor) -> Result<Tensor> {
    let (b, d) = image.dims2()?;
    if text.dims2()? != (b, d) {
        bail_config!("image {:?} and text {:?} embeddings differ in shape", image.dims(), text.dims());
    }
    if b < 2 {
        bail_data!("contrastive loss needs a batch of at least 2, got {b}");
    }
    let t = scalar_f64(temperature)?;
    if !(t > 0.0) {
        bail_data!("temperature must be positive, got {t}");
    }
    let logits = l2_normalize(image)?
        .matmul(&l2_normalize(text)?.t()?)?
        .broadcast_div(temperature)?;
    let i2t = diagonal_ce(&logits)?;
    let t2i = diagonal_ce(&logits.t()?.contiguous()?)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// Token cross-entropy over non-PAD targets.
pub struct CaptionLoss {
    pub loss: Tensor,
    pub correct: usize,
    pub counted: usize,
}

impl CaptionLoss {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.counted as f64
    }
}

/// `logits: [B, T, V]`; `targets`: `B·T` ids in row-major order, PAD where a
/// position does not count. Argmax ties resolve to the lowest id.
pub fn caption_loss(logits: &Tensor, targets: &[TokenId]) -> Result<CaptionLoss> {
    let (b, t, v) = logits.dims3()?;
    if targets.len() != b * t {
        bail_config!("{} targets for logits of shape {:?}", targets.len(), logits.dims());
    }
    let counted = targets.iter().filter(|&&id| id != PAD).count();
    if counted == 0 {
        bail_data!("caption loss over an all-PAD target");
    }
    if let Some(&bad) = targets.iter().find(|&&id| id as usize >= v) {
        bail_data!("target id {bad} outside vocabulary of {v}");
    }
    let dev = logits.device();
    let flat = logits.reshape((b * t, v))?;
    let logp = log_softmax_last(&flat)?;
    let index = Tensor::from_slice(targets, (b * t, 1), dev)?;
    let picked = logp.gather(&index, 1)?.squeeze(1)?;
    let mask: Vec<f32> = targets.iter().map(|&id| if id == PAD { 0.0 } else { 1.0 }).collect();
    let mask = Tensor::from_vec(mask, b * t, dev)?.to_dtype(logp.dtype())?;
    let loss = (picked * mask)?.sum_all()?.affine(-1.0 / counted as f64, 0.0)?;

    let scores = flat.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let correct = scores
        .iter()
        .zip(targets)
        .filter(|(_, &id)| id != PAD)
        .filter(|(row, &id)| argmax(row) == id as usize)
        .count();
    Ok(CaptionLoss { loss, correct, counted })
}

/// First index of the maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_vec(rows.iter().flatten().copied().collect::<Vec<_>>(), (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn temp(t: f64) -> Tensor {
        Tensor::new(t, &Device::Cpu).unwrap()
    }

    fn con(a: &Tensor, b: &Tensor, t: f64) -> f64 {
        scalar_f64(&contrastive_loss(a, b, &temp(t)).unwrap()).unwrap()
    }

    #[test]
    fn perfect_alignment_goes_to_zero() {
        let x = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(con(&x, &x, 1e-3) < 1e-6);
    }

    #[test]
    fn random_unit_rows_near_log_b() {
        let mut total = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = |n: usize| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
            };
            let (a, b) = (rows(32), rows(32));
            total += con(&mat(&a), &mat(&b), 1.0);
        }
        let mean = total / 100.0;
        assert!((mean - 32f64.ln()).abs() < 0.1, "{mean}");
    }

    #[test]
    fn permutation_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let base = con(&mat(&a), &mat(&b), 0.5);
        let perm = [2, 0, 3, 1];
        let pa: Vec<_> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = perm.iter().map(|&i| b[i].clone()).collect();
        assert!((con(&mat(&pa), &mat(&pb), 0.5) - base).abs() < 1e-12);
        let sa = (mat(&a) * 3.7).unwrap();
        let sb = (mat(&b) * 0.2).unwrap();
        assert!((con(&sa, &sb, 0.5) - base).abs() < 1e-10);
    }

    #[test]
    fn contrastive_errors() {
        let one = mat(&[vec![1.0, 0.0]]);
        assert!(contrastive_loss(&one, &one, &temp(0.1)).is_err());
        let two = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(contrastive_loss(&two, &two, &temp(0.0)).is_err());
    }

    fn logits(rows: Vec<Vec<f64>>, b: usize, t: usize) -> Tensor {
        let v = rows[0].len();
        mat(&rows).reshape((b, t, v)).unwrap()
    }

    #[test]
    fn confident_correct_logits() {
        let mut rows = vec![vec![0.0; 5]; 3];
        let targets = [1u32, 4, 2];
        for (r, &t) in rows.iter_mut().zip(&targets) {
            r[t as usize] = 50.0;
        }
        let out = caption_loss(&logits(rows, 1, 3), &targets).unwrap();
        assert!(scalar_f64(&out.loss).unwrap() < 1e-9);
        assert_eq!(out.accuracy(), 1.0);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let rows = vec![vec![0.0; 512]; 4];
        let out = caption_loss(&logits(rows, 2, 2), &[9, 10, 11, 12]).unwrap();
        assert!((scalar_f64(&out.loss).unwrap() - 512f64.ln()).abs() < 1e-9);
        assert!((512f64.ln() - 6.238).abs() < 1e-3);
    }

    #[test]
    fn pad_positions_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let short = caption_loss(&logits(rows[..2].to_vec(), 1, 2), &[3, 5]).unwrap();
        let padded = caption_loss(&logits(rows, 1, 4), &[3, 5, PAD, PAD]).unwrap();
        assert!((scalar_f64(&short.loss).unwrap() - scalar_f64(&padded.loss).unwrap()).abs() < 1e-12);
        assert_eq!(padded.counted, 2);
        assert!(caption_loss(&logits(vec![vec![0.0; 8]], 1, 1), &[PAD]).is_err());
    }
}
