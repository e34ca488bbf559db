//! Synthetic foot photographs with planted lesions, used by the demo and by
//! the detection-quality checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::detector::{BoundingBox, RasterImage};
use crate::imaging::{encode_png, pad_png, ImagingError};

/// Bytes in the reference demo photo, the average upload size seen in the
/// field.
pub const DEMO_PHOTO_BYTES: usize = 61_440;

/// Where the demo lesion is planted.
pub const DEMO_LESION: BoundingBox = BoundingBox::new(20, 30, 20, 20);

/// 100x100 white image with one saturated red 20x20 square at (20, 30).
pub fn planted_square() -> RasterImage {
    let mut img = RasterImage::filled(100, 100, [255, 255, 255]);
    img.fill_rect(DEMO_LESION, [255, 0, 0]);
    img
}

/// [`planted_square`] encoded as a PNG padded to [`DEMO_PHOTO_BYTES`].
pub fn demo_photo_png() -> Result<Vec<u8>, ImagingError> {
    pad_png(&encode_png(&planted_square())?, DEMO_PHOTO_BYTES)
}

/// Skin tones whose redness stays well below the default detection threshold
/// even with per-channel noise.
const SKIN_TONES: [[u8; 3]; 6] = [
    [234, 208, 190],
    [222, 196, 178],
    [198, 170, 150],
    [160, 135, 118],
    [120, 98, 85],
    [96, 78, 70],
];

const NOISE: i16 = 4;
const MARGIN: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionShape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RasterImage,
    /// Tight boxes around each planted lesion's pixels.
    pub lesions: Vec<BoundingBox>,
}

impl Scene {
    /// A skin-toned image between 96 and 256 pixels a side carrying one to
    /// three separated red lesions.
    pub fn generate(seed: u64) -> Scene {
        let mut rng = StdRng::seed_from_u64(seed);
        let width = rng.gen_range(96..=256);
        let height = rng.gen_range(96..=256);
        let tone = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];

        let pixels = (0..width * height).map(|_| jitter(&mut rng, tone)).collect();
        let mut image = RasterImage::new(width, height, pixels).expect("sized buffer");

        let wanted = rng.gen_range(1..=3);
        let mut lesions = Vec::new();
        let mut attempts = 0;
        while lesions.len() < wanted && attempts < 200 {
            attempts += 1;
            let lw = rng.gen_range(8..=40.min(width / 3));
            let lh = rng.gen_range(8..=40.min(height / 3));
            let left = rng.gen_range(MARGIN..width - lw - MARGIN);
            let top = rng.gen_range(MARGIN..height - lh - MARGIN);
            let frame = BoundingBox::new(left, top, lw, lh);
            if lesions.iter().any(|l| too_close(l, &frame)) {
                continue;
            }
            let shape = if rng.gen_bool(0.5) {
                LesionShape::Rectangle
            } else {
                LesionShape::Ellipse
            };
            let colour = [rng.gen_range(150..=230), rng.gen_range(20..=70), rng.gen_range(20..=70)];
            if let Some(tight) = paint_lesion(&mut image, &mut rng, frame, shape, colour) {
                lesions.push(tight);
            }
        }
        Scene { image, lesions }
    }
}

fn jitter(rng: &mut StdRng, base: [u8; 3]) -> [u8; 3] {
    base.map(|c| (c as i16 + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8)
}

fn too_close(a: &BoundingBox, b: &BoundingBox) -> bool {
    let sep_x = a.right() + MARGIN <= b.left || b.right() + MARGIN <= a.left;
    let sep_y = a.bottom() + MARGIN <= b.top || b.bottom() + MARGIN <= a.top;
    !(sep_x || sep_y)
}

/// Paints the lesion and returns the tight box around the pixels actually set.
fn paint_lesion(
    image: &mut RasterImage,
    rng: &mut StdRng,
    frame: BoundingBox,
    shape: LesionShape,
    colour: [u8; 3],
) -> Option<BoundingBox> {
    let cx = frame.left as f64 + frame.width as f64 / 2.0;
    let cy = frame.top as f64 + frame.height as f64 / 2.0;
    let rx = frame.width as f64 / 2.0;
    let ry = frame.height as f64 / 2.0;

    let (mut min_x, mut min_y, mut max_x, mut max_y) = (u32::MAX, u32::MAX, 0, 0);
    for y in frame.top..frame.bottom() {
        for x in frame.left..frame.right() {
            let inside = match shape {
                LesionShape::Rectangle => true,
                LesionShape::Ellipse => {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                }
            };
            if inside {
                let rgb = jitter(rng, colour);
                image.set(x, y, rgb);
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    (min_x != u32::MAX).then(|| BoundingBox::new(min_x, min_y, max_x - min_x + 1, max_y - min_y + 1))
}
