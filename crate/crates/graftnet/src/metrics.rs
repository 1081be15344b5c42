//! Segmentation metrics: Dice coefficient, intersection-over-union, and
//! pixelwise F1, plus the per-dataset report.

const EPS: f64 = 1e-8;

fn sums(pred: &[f32], target: &[f32]) -> (f64, f64, f64) {
    debug_assert_eq!(pred.len(), target.len());
    let mut inter = 0.0f64;
    let mut p_sum = 0.0f64;
    let mut t_sum = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p as f64, t as f64);
        inter += p * t;
        p_sum += p;
        t_sum += t;
    }
    (inter, p_sum, t_sum)
}

/// Dice coefficient `(2Σp·t + ε)/(Σp + Σt + ε)`; soft when `pred` carries
/// probabilities, hard when pre-thresholded.
pub fn dice(pred: &[f32], target: &[f32]) -> f64 {
    let (inter, p_sum, t_sum) = sums(pred, target);
    (2.0 * inter + EPS) / (p_sum + t_sum + EPS)
}

/// IoU `(Σp·t + ε)/(Σp + Σt − Σp·t + ε)`.
pub fn iou_metric(pred: &[f32], target: &[f32]) -> f64 {
    let (inter, p_sum, t_sum) = sums(pred, target);
    (inter + EPS) / (p_sum + t_sum - inter + EPS)
}

/// Pixelwise F1 on binary inputs. For binary masks `2PR/(P+R)` reduces
/// identically to the Dice coefficient, so this shares dice's smoothed
/// form: perfect agreement → 1, empty prediction on a nonempty target → ≈0.
pub fn f1(pred_bin: &[f32], target: &[f32]) -> f64 {
    dice(pred_bin, target)
}

#[derive(Debug, Clone)]
pub struct PerImage {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub f1: f64,
}

/// Dataset-level evaluation record: means are the arithmetic means of the
/// per-image values.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub m_dice: f64,
    pub m_iou: f64,
    pub m_f1: f64,
    pub per_image: Vec<PerImage>,
    pub n_images: usize,
    /// Manifest entries skipped as unreadable, with the reason.
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn from_per_image(per_image: Vec<PerImage>, skipped: Vec<String>) -> Self {
        let n = per_image.len();
        let inv = 1.0 / n.max(1) as f64;
        MetricsReport {
            m_dice: per_image.iter().map(|p| p.dice).sum::<f64>() * inv,
            m_iou: per_image.iter().map(|p| p.iou).sum::<f64>() * inv,
            m_f1: per_image.iter().map(|p| p.f1).sum::<f64>() * inv,
            n_images: n,
            per_image,
            skipped,
        }
    }

    /// Line-oriented records, one per image.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for p in &self.per_image {
            s.push_str(&format!(
                "id={} dice={:.6} iou={:.6} f1={:.6}\n",
                p.id, p.dice, p.iou, p.f1
            ));
        }
        s
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<20} {:>8} {:>8} {:>8}\n", "image", "dice", "iou", "f1"));
        for p in &self.per_image {
            s.push_str(&format!(
                "{:<20} {:>8.4} {:>8.4} {:>8.4}\n",
                p.id, p.dice, p.iou, p.f1
            ));
        }
        s.push_str(&format!(
            "{:<20} {:>8.4} {:>8.4} {:>8.4}  (n={})\n",
            "mean", self.m_dice, self.m_iou, self.m_f1, self.n_images
        ));
        for w in &self.skipped {
            s.push_str(&format!("skipped: {w}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_identical_binary_is_one() {
        let m = [1.0f32, 0.0, 1.0, 1.0];
        assert_eq!(dice(&m, &m), 1.0);
    }

    #[test]
    fn dice_disjoint_is_near_zero() {
        let a = [1.0f32, 1.0, 0.0, 0.0];
        let b = [0.0f32, 0.0, 1.0, 1.0];
        assert!(dice(&a, &b) < 1e-8);
    }

    #[test]
    fn dice_hand_counts() {
        let p = [1.0f32, 1.0, 0.0, 0.0];
        let t = [1.0f32, 0.0, 0.0, 0.0];
        assert!((dice(&p, &t) - 2.0 / 3.0).abs() < 1e-8);
        assert!((iou_metric(&p, &t) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn dice_iou_relation_on_binary_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        for _ in 0..100 {
            let p: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let t: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let d = dice(&p, &t);
            let i = iou_metric(&p, &t);
            assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-9, "dice {d} iou {i}");
            assert!(d >= i - 1e-12);
            assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
        }
    }

    #[test]
    fn f1_examples() {
        let t = [1.0f32, 1.0, 0.0, 0.0];
        assert_eq!(f1(&t, &t), 1.0);
        let empty = [0.0f32; 4];
        assert!(f1(&empty, &t) < 1e-6);
        // equals hard dice exactly on binary pairs
        let mut rng = ChaCha8Rng::seed_from_u64(302);
        for _ in 0..50 {
            let p: Vec<f32> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let t: Vec<f32> = (0..32).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            assert_eq!(f1(&p, &t), dice(&p, &t));
        }
    }

    #[test]
    fn f1_matches_precision_recall_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        for _ in 0..100 {
            let p: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let t: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let tp: f64 = p.iter().zip(&t).filter(|(&a, &b)| a == 1.0 && b == 1.0).count() as f64;
            let fp: f64 = p.iter().zip(&t).filter(|(&a, &b)| a == 1.0 && b == 0.0).count() as f64;
            let fng: f64 = p.iter().zip(&t).filter(|(&a, &b)| a == 0.0 && b == 1.0).count() as f64;
            let oracle = if tp == 0.0 {
                0.0
            } else {
                let prec = tp / (tp + fp);
                let rec = tp / (tp + fng);
                2.0 * prec * rec / (prec + rec)
            };
            assert!((f1(&p, &t) - oracle).abs() <= 1e-6);
        }
    }

    #[test]
    fn metrics_match_brute_force_pixel_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(304);
        for _ in 0..200 {
            let p: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let t: Vec<f32> = (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let inter = p.iter().zip(&t).filter(|(&a, &b)| a == 1.0 && b == 1.0).count() as f64;
            let ps = p.iter().filter(|&&v| v == 1.0).count() as f64;
            let ts = t.iter().filter(|&&v| v == 1.0).count() as f64;
            let d_oracle = (2.0 * inter + 1e-8) / (ps + ts + 1e-8);
            let i_oracle = (inter + 1e-8) / (ps + ts - inter + 1e-8);
            assert!((dice(&p, &t) - d_oracle).abs() <= 1e-9);
            assert!((iou_metric(&p, &t) - i_oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn report_means_are_arithmetic_means() {
        let per = vec![
            PerImage { id: "a".into(), dice: 0.5, iou: 0.4, f1: 0.5 },
            PerImage { id: "b".into(), dice: 0.9, iou: 0.8, f1: 0.9 },
        ];
        let r = MetricsReport::from_per_image(per, vec![]);
        assert!((r.m_dice - 0.7).abs() <= 1e-9);
        assert!((r.m_iou - 0.6).abs() <= 1e-9);
        assert_eq!(r.n_images, 2);
        assert!(r.to_lines().contains("id=a dice=0.500000"));
    }
}
