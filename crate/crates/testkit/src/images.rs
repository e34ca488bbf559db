use footscan_core::detector::{BoundingBox, RasterImage};
use rand::Rng;

const PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [200, 40, 30],
    [180, 120, 110],
    [120, 60, 60],
    [70, 0, 0],
    [230, 200, 185],
    [255, 255, 255],
    [10, 10, 10],
];

fn colour<R: Rng>(rng: &mut R) -> [u8; 3] {
    if rng.gen_bool(0.7) {
        PALETTE[rng.gen_range(0..PALETTE.len())]
    } else {
        [rng.gen(), rng.gen(), rng.gen()]
    }
}

/// A random image up to `max_side` pixels a side: a background, a handful of
/// overlapping rectangles, and speckle noise.
pub fn random_image<R: Rng>(rng: &mut R, max_side: u32) -> RasterImage {
    let w = rng.gen_range(1..=max_side);
    let h = rng.gen_range(1..=max_side);
    let mut img = RasterImage::filled(w, h, colour(rng));
    for _ in 0..rng.gen_range(0..=5) {
        let left = rng.gen_range(0..w);
        let top = rng.gen_range(0..h);
        let rw = rng.gen_range(1..=w - left);
        let rh = rng.gen_range(1..=h - top);
        img.fill_rect(BoundingBox::new(left, top, rw, rh), colour(rng));
    }
    let speckles = rng.gen_range(0..=(w * h / 4));
    for _ in 0..speckles {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        img.set(x, y, colour(rng));
    }
    img
}

/// A white canvas with one saturated red rectangle at `lesion`.
pub fn planted(width: u32, height: u32, lesion: BoundingBox) -> RasterImage {
    let mut img = RasterImage::filled(width, height, [255, 255, 255]);
    img.fill_rect(lesion, [255, 0, 0]);
    img
}
