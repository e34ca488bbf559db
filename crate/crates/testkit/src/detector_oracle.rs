use footscan_core::detector::{BoundingBox, Detection, DetectorConfig, RasterImage};

struct Component {
    pixels: Vec<(u32, u32)>,
}

/// Integer redness numerator: `R - max(G, B)`, so redness = value / 255.
fn redness_numerator(p: [u8; 3]) -> i32 {
    p[0] as i32 - p[1].max(p[2]) as i32
}

fn fill(
    x: u32,
    y: u32,
    label: usize,
    candidate: &[Vec<bool>],
    labels: &mut Vec<Vec<Option<usize>>>,
    out: &mut Vec<(u32, u32)>,
) {
    let (xu, yu) = (x as usize, y as usize);
    if !candidate[yu][xu] || labels[yu][xu].is_some() {
        return;
    }
    labels[yu][xu] = Some(label);
    out.push((x, y));
    let w = candidate[0].len() as u32;
    let h = candidate.len() as u32;
    if x > 0 {
        fill(x - 1, y, label, candidate, labels, out);
    }
    if x + 1 < w {
        fill(x + 1, y, label, candidate, labels, out);
    }
    if y > 0 {
        fill(x, y - 1, label, candidate, labels, out);
    }
    if y + 1 < h {
        fill(x, y + 1, label, candidate, labels, out);
    }
}

/// Overlap measured by counting the pixels covered by each box.
pub fn pixel_count_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inside = |bx: &BoundingBox, x: u32, y: u32| {
        x >= bx.left && x < bx.left + bx.width && y >= bx.top && y < bx.top + bx.height
    };
    let max_x = (a.left + a.width).max(b.left + b.width);
    let max_y = (a.top + a.height).max(b.top + b.height);
    let (mut both, mut either) = (0u64, 0u64);
    for y in 0..max_y {
        for x in 0..max_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            if ia && ib {
                both += 1;
            }
            if ia || ib {
                either += 1;
            }
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Brute-force re-derivation of the reference detector's output.
pub fn brute_force_detect(image: &RasterImage, config: &DetectorConfig) -> Vec<Detection> {
    let (w, h) = (image.width(), image.height());
    let candidate: Vec<Vec<bool>> = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let p = image.get(x, y);
                    let r = redness_numerator(p) as f64 / 255.0;
                    r >= config.redness_threshold && p[0] >= config.min_red_channel
                })
                .collect()
        })
        .collect();

    let mut labels = vec![vec![None; w as usize]; h as usize];
    let mut components = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut pixels = Vec::new();
            fill(x, y, components.len(), &candidate, &mut labels, &mut pixels);
            if !pixels.is_empty() {
                components.push(Component { pixels });
            }
        }
    }

    let min_area = (config.min_area_fraction * w as f64 * h as f64).max(config.min_area_floor as f64);
    let mut raw: Vec<Detection> = components
        .iter()
        .filter(|c| c.pixels.len() as f64 >= min_area)
        .map(|c| {
            let left = c.pixels.iter().map(|p| p.0).min().unwrap();
            let right = c.pixels.iter().map(|p| p.0).max().unwrap();
            let top = c.pixels.iter().map(|p| p.1).min().unwrap();
            let bottom = c.pixels.iter().map(|p| p.1).max().unwrap();
            let total: i64 = c
                .pixels
                .iter()
                .map(|&(x, y)| redness_numerator(image.get(x, y)) as i64)
                .sum();
            let mean = total as f64 / (255.0 * c.pixels.len() as f64);
            Detection::new(
                BoundingBox::new(left, top, right - left + 1, bottom - top + 1),
                (2.0 * mean).min(1.0),
            )
        })
        .collect();

    let rank = |d: &Detection| (std::cmp::Reverse(ordered(d.confidence)), d.bbox.top, d.bbox.left);
    raw.sort_by_key(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in raw {
        let suppressed = kept.iter().any(|k| pixel_count_iou(&k.bbox, &d.bbox) > config.nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.retain(|d| d.confidence >= config.report_threshold);
    kept.sort_by_key(rank);
    kept
}

/// Total order key for non-NaN confidences.
fn ordered(v: f64) -> u64 {
    debug_assert!(v >= 0.0);
    v.to_bits()
}

/// Exact boxes, confidences within `tol`.
pub fn outputs_match(a: &[Detection], b: &[Detection], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.bbox == y.bbox && (x.confidence - y.confidence).abs() <= tol)
}
