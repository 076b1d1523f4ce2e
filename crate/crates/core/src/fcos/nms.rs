use super::decode::Detection;
use crate::boxes::iou;

/// Greedy class-wise suppression.
///
/// Candidates are visited by descending score (earlier index first on ties);
/// a candidate survives unless a kept box of the same label overlaps it with
/// IoU above `iou_threshold`. At most `budget` survivors are returned, sorted
/// by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f32, budget: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() >= budget {
            break;
        }
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.label == d.label && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: [f32; 4], score: f32, label: usize) -> Detection {
        Detection {
            bbox,
            label,
            score,
            level: 3,
            centerness: 1.0,
        }
    }

    #[test]
    fn singleton_survives() {
        let d = vec![det([0.0, 0.0, 4.0, 4.0], 0.5, 0)];
        assert_eq!(nms(&d, 0.5, 10), d);
    }

    #[test]
    fn identical_boxes_keep_the_higher_score() {
        let d = vec![det([0.0, 0.0, 4.0, 4.0], 0.8, 0), det([0.0, 0.0, 4.0, 4.0], 0.9, 0)];
        let k = nms(&d, 0.5, 10);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].score, 0.9);
    }

    #[test]
    fn other_classes_are_not_suppressed() {
        let d = vec![det([0.0, 0.0, 4.0, 4.0], 0.8, 0), det([0.0, 0.0, 4.0, 4.0], 0.9, 1)];
        assert_eq!(nms(&d, 0.5, 10).len(), 2);
    }

    #[test]
    fn budget_caps_survivors() {
        let d: Vec<_> = (0..10)
            .map(|i| det([i as f32 * 10.0, 0.0, i as f32 * 10.0 + 5.0, 5.0], 0.1 * i as f32, 0))
            .collect();
        let k = nms(&d, 0.5, 3);
        assert_eq!(
            k.iter().map(|d| d.score).collect::<Vec<_>>(),
            [9, 8, 7].map(|i| 0.1 * i as f32).to_vec()
        );
    }
}
