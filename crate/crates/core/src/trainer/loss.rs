use crate::error::{Error, Result};
use crate::tape::{Tape, ValId};
use crate::tensor::{cosine, Tensor};

/// Cosine similarity of one embedding against each row of a class matrix.
pub fn scores(x: &Tensor, y_set: &Tensor) -> Result<Tensor> {
    if y_set.rank() != 2 {
        return Err(Error::shape(
            "scores",
            format!("class matrix must be rank 2, got {:?}", y_set.shape()),
        ));
    }
    let (n, d) = y_set.rows_cols();
    if x.numel() != d {
        return Err(Error::shape(
            "scores",
            format!("embedding width {} vs class width {d}", x.numel()),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let row = Tensor::new(vec![d], y_set.data()[c * d..(c + 1) * d].to_vec())?;
        out.push(cosine(x, &row)?);
    }
    Tensor::new(vec![n], out)
}

/// Lowest-index argmax, the deterministic prediction rule.
pub fn argmax(scores: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in scores.data().iter().enumerate() {
        if v > scores.data()[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled cross-entropy over a score matrix, computed directly.
pub fn ce_loss(scores: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (rows, cols) = scores.rows_cols();
    if labels.len() != rows {
        return Err(Error::contract(format!(
            "{} labels for {rows} score rows",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(Error::contract(format!(
                "label {label} out of range for {cols} classes"
            )));
        }
        let z: Vec<f64> = scores.data()[r * cols..(r + 1) * cols]
            .iter()
            .map(|&s| s / tau)
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    Ok(total / rows as f64)
}

/// Tape node for the `[rows_a, rows_b]` cosine matrix of two embedding
/// batches, scaled by `1/tau`.
pub fn cosine_logits(tape: &mut Tape, a: ValId, b: ValId, tau: f64) -> Result<ValId> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let sims = tape.matmul_nt(an, bn)?;
    tape.scale(sims, 1.0 / tau)
}

/// Training objective: mean cross-entropy of image-vs-class cosine logits.
pub fn contrastive_loss(
    tape: &mut Tape,
    img: ValId,
    txt: ValId,
    labels: &[usize],
    tau: f64,
) -> Result<ValId> {
    let logits = cosine_logits(tape, img, txt, tau)?;
    tape.cross_entropy_mean(logits, labels)
}

/// Pretraining objective on an aligned batch (row i of `img` matches row i
/// of `txt`): both softmax directions, averaged.
pub fn symmetric_loss(tape: &mut Tape, img: ValId, txt: ValId, tau: f64) -> Result<ValId> {
    let (ri, _) = tape.value(img).rows_cols();
    let (rt, _) = tape.value(txt).rows_cols();
    if ri != rt {
        return Err(Error::contract(format!(
            "aligned batch needs equal row counts, got {ri} and {rt}"
        )));
    }
    let diag: Vec<usize> = (0..ri).collect();
    let logits = cosine_logits(tape, img, txt, tau)?;
    let i2t = tape.cross_entropy_mean(logits, &diag)?;
    let flipped = tape.transpose(logits)?;
    let t2i = tape.cross_entropy_mean(flipped, &diag)?;
    let sum = tape.add(i2t, t2i)?;
    tape.scale(sum, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_identities() {
        let x = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let y = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, -1.0, 1.0, 0.0]).unwrap();
        let s = scores(&x, &y).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1].abs() < 1e-15);
        // (1,1)/sqrt2 against (1,0): 1/sqrt2
        assert!((s.data()[2] - 1.0 / 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(argmax(&s), 0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let s = Tensor::new(vec![3], vec![0.5, 0.5, 0.1]).unwrap();
        assert_eq!(argmax(&s), 0);
    }

    #[test]
    fn ce_loss_frozen_values() {
        // equal scores over two classes: ln 2
        let s = Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
        assert!((ce_loss(&s, &[0], 1.0).unwrap() - 2.0_f64.ln()).abs() < 1e-15);
        // scores [1,0], label 0, tau 1: -ln(e/(e+1)) = 0.3132616875182229
        let s = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!((ce_loss(&s, &[0], 1.0).unwrap() - 0.3132616875182229).abs() < 1e-15);
        // raising the true-class score strictly decreases the loss
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let s = Tensor::new(vec![1, 2], vec![0.2 * k as f64, 0.0]).unwrap();
            let l = ce_loss(&s, &[0], 0.5).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn ce_loss_rejects_bad_inputs() {
        let s = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(ce_loss(&s, &[2], 1.0).is_err());
        assert!(ce_loss(&s, &[0, 1], 1.0).is_err());
        assert!(ce_loss(&s, &[0], 0.0).is_err());
        assert!(ce_loss(&s, &[0], -1.0).is_err());
    }

    #[test]
    fn tape_losses_match_direct_computation() {
        let img = Tensor::new(vec![2, 3], vec![0.3, -1.0, 0.5, 2.0, 0.1, -0.4]).unwrap();
        let txt = Tensor::new(vec![2, 3], vec![1.0, 0.2, 0.0, -0.3, 0.8, 0.9]).unwrap();
        let tau = 0.5;

        let mut tape = Tape::new();
        let i = tape.constant(img.clone());
        let t = tape.constant(txt.clone());
        let loss = contrastive_loss(&mut tape, i, t, &[1, 0], tau).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();

        // independent recomputation from unit-normalized rows
        let mut sims = Tensor::zeros(vec![2, 2]);
        for r in 0..2 {
            for c in 0..2 {
                let a = Tensor::new(vec![3], img.data()[r * 3..r * 3 + 3].to_vec()).unwrap();
                let b = Tensor::new(vec![3], txt.data()[c * 3..c * 3 + 3].to_vec()).unwrap();
                sims.data_mut()[r * 2 + c] = cosine(&a, &b).unwrap();
            }
        }
        let want = ce_loss(&sims, &[1, 0], tau).unwrap();
        assert!((got - want).abs() < 1e-14);

        let mut tape = Tape::new();
        let i = tape.constant(img);
        let t = tape.constant(txt);
        let loss = symmetric_loss(&mut tape, i, t, tau).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        let mut flipped = Tensor::zeros(vec![2, 2]);
        for r in 0..2 {
            for c in 0..2 {
                flipped.data_mut()[r * 2 + c] = sims.data()[c * 2 + r];
            }
        }
        let want =
            0.5 * (ce_loss(&sims, &[0, 1], tau).unwrap() + ce_loss(&flipped, &[0, 1], tau).unwrap());
        assert!((got - want).abs() < 1e-14);
    }
}
