//! CAM extraction and aggregation: per-exit class-softmax maps for the
//! predicted class, confidence weights across exits, bilinear upsampling to
//! input resolution, and inverted-mask image construction.

use crate::error::{Error, Result};
use crate::model::{predicted_class, ExitOutputs, Model};
use crate::tensor::Tensor;

/// One exit's contribution to the final map.
#[derive(Debug, Clone)]
pub struct ExitCam {
    /// 1-based stage index.
    pub stage: usize,
    /// (H_e, W_e) normalized map in [0,1] for the predicted class.
    pub cam: Tensor,
    /// Softmax confidence weight; selected exits sum to 1.
    pub weight: f32,
}

#[derive(Debug, Clone)]
pub struct CamBundle {
    pub predicted_class: usize,
    /// Stages actually used, ascending.
    pub exit_mask: Vec<usize>,
    pub exit_cams: Vec<ExitCam>,
    /// (H, W) aggregated map at input resolution, values in [0,1].
    pub aggregated: Tensor,
}

/// Per-pixel softmax across the class channels of one exit's activation
/// map, then the predicted class's channel. No range normalization.
pub fn exit_cam_softmax(activation_map: &Tensor, predicted: usize) -> Result<Tensor> {
    if activation_map.rank() != 4 || activation_map.shape()[0] != 1 {
        return Err(Error::invalid(
            "exit_cam",
            format!("expected (1,C,H,W) map, got {:?}", activation_map.shape()),
        ));
    }
    let (c, h, w) = (
        activation_map.shape()[1],
        activation_map.shape()[2],
        activation_map.shape()[3],
    );
    if c < 2 {
        return Err(Error::invalid(
            "exit_cam",
            format!("class softmax needs at least 2 channels, got {c}"),
        ));
    }
    if predicted >= c {
        return Err(Error::invalid(
            "exit_cam",
            format!("class {predicted} out of range for {c} channels"),
        ));
    }
    let v = activation_map.data();
    let mut out = vec![0.0f32; h * w];
    for p in 0..h * w {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(v[ch * h * w + p] as f64);
        }
        let mut denom = 0.0f64;
        for ch in 0..c {
            denom += (v[ch * h * w + p] as f64 - m).exp();
        }
        out[p] = ((v[predicted * h * w + p] as f64 - m).exp() / denom) as f32;
    }
    drop(v);
    Tensor::new(&[h, w], out)
}

/// Min-max rescale a map to [0,1]. A constant map becomes all zeros: no
/// spatial evidence means no masking.
pub fn rescale_unit(map: &Tensor) -> Result<Tensor> {
    let v = map.data();
    let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let out: Vec<f32> = if hi == lo {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    };
    drop(v);
    Tensor::new(map.shape(), out)
}

/// Normalized CAM for the predicted class at one exit: class softmax per
/// pixel, predicted channel, min-max rescaled to [0,1].
pub fn exit_cam(activation_map: &Tensor, predicted: usize) -> Result<Tensor> {
    rescale_unit(&exit_cam_softmax(activation_map, predicted)?)
}

/// Softmax confidence weights over the selected exits' predicted-class
/// logits. `selected` aligns with `exit_logits`; unselected exits get
/// weight 0 and contribute nothing downstream.
pub fn exit_weights(
    exit_logits: &[Tensor],
    predicted: usize,
    selected: &[bool],
) -> Result<Vec<f32>> {
    if exit_logits.len() != selected.len() {
        return Err(Error::invalid(
            "exit_weights",
            format!("{} masks for {} exits", selected.len(), exit_logits.len()),
        ));
    }
    if !selected.iter().any(|&s| s) {
        return Err(Error::invalid("exit_weights", "empty exit mask"));
    }
    let mut confidences = Vec::new();
    for (logits, &on) in exit_logits.iter().zip(selected) {
        if !on {
            continue;
        }
        let v = logits.to_vec();
        if predicted >= v.len() {
            return Err(Error::invalid(
                "exit_weights",
                format!("class {predicted} out of range for {} logits", v.len()),
            ));
        }
        confidences.push(v[predicted] as f64);
    }
    let m = confidences.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = confidences.iter().map(|c| (c - m).exp()).sum();
    let mut soft = confidences.iter().map(|c| ((c - m).exp() / denom) as f32);
    Ok(selected
        .iter()
        .map(|&on| if on { soft.next().expect("one per selected") } else { 0.0 })
        .collect())
}

/// Align-corners-false bilinear upsampling of a (H,W) map. Downscaling is
/// rejected. Constant maps stay constant; outputs stay within the source
/// range.
pub fn upsample_bilinear(map: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::invalid(
            "upsample_bilinear",
            format!("expected (H,W) map, got {:?}", map.shape()),
        ));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if target_h < h || target_w < w {
        return Err(Error::invalid(
            "upsample_bilinear",
            format!("target {target_h}x{target_w} smaller than source {h}x{w}"),
        ));
    }
    let src = map.data();
    let mut out = vec![0.0f32; target_h * target_w];
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    for y in 0..target_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for x in 0..target_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let v = src[y0 * w + x0] as f64 * (1.0 - dy) * (1.0 - dx)
                + src[y0 * w + x1] as f64 * (1.0 - dy) * dx
                + src[y1 * w + x0] as f64 * dy * (1.0 - dx)
                + src[y1 * w + x1] as f64 * dy * dx;
            out[y * target_w + x] = v as f32;
        }
    }
    drop(src);
    Tensor::new(&[target_h, target_w], out)
}

/// Weighted sum of upsampled per-exit CAMs. Weights must sum to 1; the
/// result is a convex combination, clamped to [0,1] against rounding.
pub fn aggregate(cams: &[Tensor], weights: &[f32], target_h: usize, target_w: usize) -> Result<Tensor> {
    if cams.is_empty() || cams.len() != weights.len() {
        return Err(Error::invalid(
            "aggregate",
            format!("{} cams with {} weights", cams.len(), weights.len()),
        ));
    }
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if (total - 1.0).abs() > 1e-3 {
        return Err(Error::invalid(
            "aggregate",
            format!("weights sum to {total}, expected 1"),
        ));
    }
    let mut acc = vec![0.0f64; target_h * target_w];
    for (cam, &w) in cams.iter().zip(weights) {
        let up = upsample_bilinear(cam, target_h, target_w)?;
        let v = up.data();
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += w as f64 * *x as f64;
        }
    }
    Tensor::new(
        &[target_h, target_w],
        acc.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
    )
}

/// x' = x * (1 - mask), mask broadcast across channels.
pub fn mask_image(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 || mask.rank() != 2 {
        return Err(Error::invalid(
            "mask_image",
            format!("expected (N,C,H,W) image and (H,W) mask, got {:?} and {:?}", x.shape(), mask.shape()),
        ));
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if mask.shape() != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "mask_image",
            lhs: x.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let xv = x.data();
    let mv = mask.data();
    let mut out = vec![0.0f32; x.numel()];
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * h * w;
            for p in 0..h * w {
                out[base + p] = xv[base + p] * (1.0 - mv[p]);
            }
        }
    }
    drop(xv);
    drop(mv);
    Tensor::new(x.shape(), out)
}

/// Build the CAM bundle from exit outputs already computed for one input.
/// `exit_mask` lists 1-based stage indices; it must be a non-empty subset
/// of the exits present in `outputs`.
pub fn bundle_from_outputs(
    outputs: &ExitOutputs,
    exit_mask: &[usize],
    input_size: usize,
) -> Result<CamBundle> {
    if exit_mask.is_empty() {
        return Err(Error::invalid("cam_pipeline", "empty exit mask"));
    }
    let mut mask_sorted = exit_mask.to_vec();
    mask_sorted.sort_unstable();
    mask_sorted.dedup();
    for &stage in &mask_sorted {
        if !outputs.exits.iter().any(|e| e.stage == stage) {
            return Err(Error::invalid(
                "cam_pipeline",
                format!("exit mask names stage {stage}, which carries no exit"),
            ));
        }
    }
    let predicted = predicted_class(outputs);
    let selected: Vec<bool> = outputs
        .exits
        .iter()
        .map(|e| mask_sorted.contains(&e.stage))
        .collect();
    let all_logits: Vec<Tensor> = outputs.exits.iter().map(|e| e.logits.clone()).collect();
    let weights = exit_weights(&all_logits, predicted, &selected)?;

    let mut exit_cams = Vec::new();
    for (i, exit) in outputs.exits.iter().enumerate() {
        if !selected[i] {
            continue;
        }
        exit_cams.push(ExitCam {
            stage: exit.stage,
            cam: exit_cam(&exit.activation_map, predicted)?,
            weight: weights[i],
        });
    }
    let cams: Vec<Tensor> = exit_cams.iter().map(|e| e.cam.clone()).collect();
    let ws: Vec<f32> = exit_cams.iter().map(|e| e.weight).collect();
    let aggregated = aggregate(&cams, &ws, input_size, input_size)?;
    Ok(CamBundle {
        predicted_class: predicted,
        exit_mask: mask_sorted,
        exit_cams,
        aggregated,
    })
}

/// Full pipeline: forward, per-exit CAMs, weights, aggregation, masking.
/// Returns the bundle and the masked image x'.
pub fn cam_pipeline(model: &Model, x: &Tensor, exit_mask: &[usize]) -> Result<(CamBundle, Tensor)> {
    let outputs = model.forward(x)?;
    let bundle = bundle_from_outputs(&outputs, exit_mask, model.config().input_size)?;
    let masked = mask_image(x, &bundle.aggregated)?;
    Ok((bundle, masked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_channels_rescale_to_zero() {
        // C=2, both channels equal everywhere: softmax 0.5, constant map -> zeros
        let map = Tensor::new(&[1, 2, 2, 2], vec![0.3; 8]).unwrap();
        let raw = exit_cam_softmax(&map, 0).unwrap();
        assert!(raw.to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let cam = exit_cam(&map, 0).unwrap();
        assert!(cam.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_hot_pixel_rescales_to_one() {
        // channel P exceeds the other by ln 2 at one pixel: softmax 2/3
        // there, 0.5 elsewhere; rescale puts that pixel at 1, rest at 0
        let mut data = vec![0.0f32; 8];
        data[0] = std::f32::consts::LN_2; // channel 0, pixel 0
        let map = Tensor::new(&[1, 2, 2, 2], data).unwrap();
        let raw = exit_cam_softmax(&map, 0).unwrap();
        assert!((raw.to_vec()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((raw.to_vec()[1] - 0.5).abs() < 1e-6);
        let cam = exit_cam(&map, 0).unwrap();
        let v = cam.to_vec();
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!(v[1..].iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn exit_cam_rejects_single_class() {
        let map = Tensor::new(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(exit_cam(&map, 0).is_err());
    }

    #[test]
    fn exit_cam_shift_invariant_pre_rescale() {
        let base = Tensor::new(&[1, 2, 2, 2], vec![0.1, 0.9, -0.4, 0.5, 0.2, -0.7, 1.1, 0.0]).unwrap();
        let shifted = Tensor::new(
            &[1, 2, 2, 2],
            base.to_vec().iter().map(|v| v + 2.5).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = exit_cam_softmax(&base, 1).unwrap();
        let b = exit_cam_softmax(&shifted, 1).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_logits_give_uniform_weights() {
        let logits: Vec<Tensor> = (0..4)
            .map(|_| Tensor::new(&[1, 2], vec![0.8, -0.1]).unwrap())
            .collect();
        let w = exit_weights(&logits, 0, &[true; 4]).unwrap();
        for &wi in &w {
            assert!((wi - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn two_exit_analytic_weights() {
        let a = Tensor::new(&[1, 2], vec![3.0f32.ln(), 0.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let w = exit_weights(&[a, b], 0, &[true, true]).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-6);
        assert!((w[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn single_exit_mask_gets_weight_one() {
        let logits: Vec<Tensor> = (0..3)
            .map(|i| Tensor::new(&[1, 2], vec![i as f32, 0.0]).unwrap())
            .collect();
        let w = exit_weights(&logits, 0, &[false, true, false]).unwrap();
        assert_eq!(w, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let logits = vec![Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap()];
        assert!(exit_weights(&logits, 0, &[false]).is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let m = Tensor::new(&[2, 2], vec![0.3; 4]).unwrap();
        let up = upsample_bilinear(&m, 7, 5).unwrap();
        assert!(up.to_vec().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn upsample_single_source_broadcasts() {
        let m = Tensor::new(&[1, 1], vec![0.42]).unwrap();
        let up = upsample_bilinear(&m, 4, 6).unwrap();
        assert!(up.to_vec().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn upsample_rejects_downscale() {
        let m = Tensor::new(&[4, 4], vec![0.0; 16]).unwrap();
        assert!(upsample_bilinear(&m, 2, 4).is_err());
    }

    #[test]
    fn aggregate_identical_maps_is_fixed_point() {
        let a = Tensor::new(&[2, 2], vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let out = aggregate(&[a.clone(), a.clone()], &[0.3, 0.7], 4, 4).unwrap();
        let direct = upsample_bilinear(&a, 4, 4).unwrap();
        for (x, y) in out.to_vec().iter().zip(direct.to_vec()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregate_one_hot_weight_projects() {
        let a = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.5, 0.3]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.2; 4]).unwrap();
        let out = aggregate(&[a.clone(), b], &[1.0, 0.0], 4, 4).unwrap();
        let direct = upsample_bilinear(&a, 4, 4).unwrap();
        for (x, y) in out.to_vec().iter().zip(direct.to_vec()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn aggregate_convex_combination_of_extremes() {
        let zeros = Tensor::new(&[2, 2], vec![0.0; 4]).unwrap();
        let ones = Tensor::new(&[2, 2], vec![1.0; 4]).unwrap();
        let out = aggregate(&[zeros, ones], &[0.25, 0.75], 2, 2).unwrap();
        assert!(out.to_vec().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn mask_identities_are_bit_exact() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.9, 0.1, 0.5, 0.3]).unwrap();
        let zero = Tensor::new(&[2, 2], vec![0.0; 4]).unwrap();
        let one = Tensor::new(&[2, 2], vec![1.0; 4]).unwrap();
        assert_eq!(mask_image(&x, &zero).unwrap().to_vec(), x.to_vec());
        assert!(mask_image(&x, &one).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_mask_halves_pixels() {
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.8, 0.4]).unwrap();
        let half = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(mask_image(&x, &half).unwrap().to_vec(), vec![0.4, 0.2]);
    }

    #[test]
    fn mask_resolution_mismatch_is_rejected() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let m = Tensor::new(&[3, 3], vec![0.0; 9]).unwrap();
        assert!(mask_image(&x, &m).is_err());
    }
}
