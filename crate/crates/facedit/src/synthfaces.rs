//! Procedural face corpus: parametric cartoon faces with continuous identity
//! parameters and categorical editable attributes.
//!
//! Faces are rasterized at 32x32 from flat-colored, anti-aliased
//! signed-distance shapes, one layer per semantic region. Because every
//! attribute maps to a known set of layers, the renderer can produce an exact
//! mask of the pixels an attribute flip may touch, and the ground-truth
//! render of any edited attribute combination is available for free.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::condition::{CaptionTokens, Vocabulary};
use crate::error::{Error, Result};
use crate::run::{sha256_hex, stable_hash64};

/// Canvas side in pixels.
pub const IMG_SIZE: usize = 32;

/// Continuous identity parameters; ranges are documented on each field.
#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub identity_id: u64,
    /// Face half-width as a fraction of the canvas half-width, in [0.55, 0.80].
    pub face_width_ratio: f64,
    /// Eye x-offset as a fraction of the face half-width, in [0.34, 0.60].
    pub eye_spacing: f64,
    /// Vertical eye offset as a fraction of the canvas height, in [-0.06, 0.10].
    pub eye_height: f64,
    /// Nose length as a fraction of the canvas height, in [0.09, 0.20].
    pub nose_length: f64,
    /// Continuous index into the skin palette, in [0, 4).
    pub skin_tone_index: f64,
    /// Additive warm/cool color jitter, in [-0.05, 0.05].
    pub base_hue_jitter: f64,
}

pub const FACE_WIDTH_RANGE: (f64, f64) = (0.55, 0.80);
pub const EYE_SPACING_RANGE: (f64, f64) = (0.34, 0.60);
pub const EYE_HEIGHT_RANGE: (f64, f64) = (-0.06, 0.10);
pub const NOSE_LENGTH_RANGE: (f64, f64) = (0.09, 0.20);
pub const SKIN_TONE_RANGE: (f64, f64) = (0.0, 3.999);
pub const HUE_JITTER_RANGE: (f64, f64) = (-0.05, 0.05);

/// Draws identity parameters uniformly from their ranges, deterministically
/// for a fixed seed; `identity_id` is the seed itself.
pub fn sample_identity(seed: u64) -> Identity {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(&[seed, 0x1d]));
    let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    Identity {
        identity_id: seed,
        face_width_ratio: u(&mut rng, FACE_WIDTH_RANGE),
        eye_spacing: u(&mut rng, EYE_SPACING_RANGE),
        eye_height: u(&mut rng, EYE_HEIGHT_RANGE),
        nose_length: u(&mut rng, NOSE_LENGTH_RANGE),
        skin_tone_index: u(&mut rng, SKIN_TONE_RANGE),
        base_hue_jitter: u(&mut rng, HUE_JITTER_RANGE),
    }
}

impl Identity {
    pub fn in_ranges(&self) -> bool {
        let ok = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        ok(self.face_width_ratio, FACE_WIDTH_RANGE)
            && ok(self.eye_spacing, EYE_SPACING_RANGE)
            && ok(self.eye_height, EYE_HEIGHT_RANGE)
            && ok(self.nose_length, NOSE_LENGTH_RANGE)
            && ok(self.skin_tone_index, SKIN_TONE_RANGE)
            && ok(self.base_hue_jitter, HUE_JITTER_RANGE)
    }
}

macro_rules! attr_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(&self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w {
                    $($word => Some($name::$variant)),+,
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.word())
            }
        }
    };
}

attr_enum!(HairColor { Black => "black", Blonde => "blonde", Pink => "pink", Blue => "blue" });
attr_enum!(Expression { Smiling => "smiling", Neutral => "neutral", Sad => "sad" });
attr_enum!(AgeBand { Young => "young", Old => "old" });
attr_enum!(GenderStyle { A => "person_a", B => "person_b" });

/// The full editable attribute set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeVector {
    pub hair_color: HairColor,
    pub glasses: bool,
    pub expression: Expression,
    pub age_band: AgeBand,
    pub beard: bool,
    pub chubby: bool,
    pub gender_style: GenderStyle,
}

/// Names of the editable fields, used for targeted-accuracy scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttrField {
    Hair,
    Glasses,
    Expression,
    Age,
    Beard,
    Chubby,
    Gender,
}

impl AttrField {
    pub const ALL: &'static [AttrField] = &[
        AttrField::Hair,
        AttrField::Glasses,
        AttrField::Expression,
        AttrField::Age,
        AttrField::Beard,
        AttrField::Chubby,
        AttrField::Gender,
    ];
}

impl AttributeVector {
    /// Uniform draw over all 384 combinations.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            hair_color: HairColor::ALL[rng.random_range(0..4)],
            glasses: rng.random_bool(0.5),
            expression: Expression::ALL[rng.random_range(0..3)],
            age_band: AgeBand::ALL[rng.random_range(0..2)],
            beard: rng.random_bool(0.5),
            chubby: rng.random_bool(0.5),
            gender_style: GenderStyle::ALL[rng.random_range(0..2)],
        }
    }

    /// Every combination in a fixed enumeration order.
    pub fn enumerate_all() -> Vec<Self> {
        let mut out = Vec::with_capacity(384);
        for &hair_color in HairColor::ALL {
            for &glasses in &[false, true] {
                for &expression in Expression::ALL {
                    for &age_band in AgeBand::ALL {
                        for &beard in &[false, true] {
                            for &chubby in &[false, true] {
                                for &gender_style in GenderStyle::ALL {
                                    out.push(Self {
                                        hair_color,
                                        glasses,
                                        expression,
                                        age_band,
                                        beard,
                                        chubby,
                                        gender_style,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn field_matches(&self, other: &AttributeVector, field: AttrField) -> bool {
        match field {
            AttrField::Hair => self.hair_color == other.hair_color,
            AttrField::Glasses => self.glasses == other.glasses,
            AttrField::Expression => self.expression == other.expression,
            AttrField::Age => self.age_band == other.age_band,
            AttrField::Beard => self.beard == other.beard,
            AttrField::Chubby => self.chubby == other.chubby,
            AttrField::Gender => self.gender_style == other.gender_style,
        }
    }
}

/// Caption template:
/// `{chubby?} {age} {person_x} {hair_color} hair {glasses?} {beard?} {expression}`.
pub fn caption_of(attrs: &AttributeVector, vocab: &Vocabulary) -> CaptionTokens {
    let mut words: Vec<&str> = Vec::with_capacity(8);
    if attrs.chubby {
        words.push("chubby");
    }
    words.push(attrs.age_band.word());
    words.push(attrs.gender_style.word());
    words.push(attrs.hair_color.word());
    words.push("hair");
    if attrs.glasses {
        words.push("glasses");
    }
    if attrs.beard {
        words.push("beard");
    }
    words.push(attrs.expression.word());
    CaptionTokens::from_words(&words, vocab).expect("template words are all in the vocabulary")
}

/// Total inverse of [`caption_of`] on valid captions.
pub fn attributes_from_caption(
    tokens: &CaptionTokens,
    vocab: &Vocabulary,
) -> Result<AttributeVector> {
    let words: Vec<String> = tokens
        .content_ids()
        .iter()
        .map(|&id| vocab.word(id).map(|s| s.to_string()))
        .collect::<Result<_>>()?;
    let mut it = words.iter().peekable();
    let chubby = if it.peek().map(|w| w.as_str()) == Some("chubby") {
        it.next();
        true
    } else {
        false
    };
    let age = it
        .next()
        .and_then(|w| AgeBand::from_word(w))
        .ok_or_else(|| Error::CaptionEdit("expected age word".into()))?;
    let gender = it
        .next()
        .and_then(|w| GenderStyle::from_word(w))
        .ok_or_else(|| Error::CaptionEdit("expected person word".into()))?;
    let hair = it
        .next()
        .and_then(|w| HairColor::from_word(w))
        .ok_or_else(|| Error::CaptionEdit("expected hair color word".into()))?;
    if it.next().map(|w| w.as_str()) != Some("hair") {
        return Err(Error::CaptionEdit("expected literal 'hair'".into()));
    }
    let glasses = if it.peek().map(|w| w.as_str()) == Some("glasses") {
        it.next();
        true
    } else {
        false
    };
    let beard = if it.peek().map(|w| w.as_str()) == Some("beard") {
        it.next();
        true
    } else {
        false
    };
    let expression = it
        .next()
        .and_then(|w| Expression::from_word(w))
        .ok_or_else(|| Error::CaptionEdit("expected expression word".into()))?;
    if it.next().is_some() {
        return Err(Error::CaptionEdit("trailing words in caption".into()));
    }
    Ok(AttributeVector {
        hair_color: hair,
        glasses,
        expression,
        age_band: age,
        beard,
        chubby,
        gender_style: gender,
    })
}

// ---------------------------------------------------------------------------
// Renderer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Background,
    Face,
    Wrinkles,
    Nose,
    EyeWhites,
    Pupils,
    Glasses,
    Beard,
    Mouth,
    Hair,
}

/// One flat-colored layer with its anti-aliased coverage.
#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub color: [f64; 3],
    pub alpha: Array2<f64>,
}

const BACKGROUND: [f64; 3] = [0.82, 0.87, 0.91];
const EYE_WHITE: [f64; 3] = [0.97, 0.97, 0.97];
const PUPIL: [f64; 3] = [0.16, 0.12, 0.10];
/// Pure black, reserved for glasses frames so the "no unrelated layer can
/// produce this color" test holds exactly.
const GLASSES_COLOR: [f64; 3] = [0.0, 0.0, 0.0];
const MOUTH_COLOR: [f64; 3] = [0.62, 0.16, 0.18];
const BEARD_COLOR: [f64; 3] = [0.25, 0.17, 0.10];
const GRAY_HAIR: [f64; 3] = [0.78, 0.78, 0.80];
const SKIN_PALETTE: [[f64; 3]; 5] = [
    [0.98, 0.86, 0.76],
    [0.93, 0.78, 0.64],
    [0.85, 0.65, 0.48],
    [0.70, 0.48, 0.32],
    [0.52, 0.34, 0.22],
];

fn hair_base_color(c: HairColor) -> [f64; 3] {
    match c {
        HairColor::Black => [0.09, 0.08, 0.08],
        HairColor::Blonde => [0.90, 0.78, 0.35],
        HairColor::Pink => [0.95, 0.55, 0.75],
        HairColor::Blue => [0.25, 0.45, 0.95],
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn skin_color(identity: &Identity) -> [f64; 3] {
    let idx = identity.skin_tone_index.clamp(0.0, 3.999);
    let lo = idx.floor() as usize;
    let t = idx - lo as f64;
    let mut c = lerp3(SKIN_PALETTE[lo], SKIN_PALETTE[(lo + 1).min(4)], t);
    let j = identity.base_hue_jitter;
    c[0] = (c[0] + j).clamp(0.0, 1.0);
    c[2] = (c[2] - j).clamp(0.0, 1.0);
    c
}

/// Signed distances: negative inside. Coverage is `clamp(0.5 - sdf, 0, 1)`,
/// a one-pixel linear anti-aliasing band.
#[derive(Clone, Copy)]
enum Shape {
    Circle { c: (f64, f64), r: f64 },
    /// Stroked circle outline.
    Ring { c: (f64, f64), r: f64, half_w: f64 },
    Ellipse { c: (f64, f64), rx: f64, ry: f64 },
    Segment { a: (f64, f64), b: (f64, f64), half_w: f64 },
}

impl Shape {
    fn sdf(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Circle { c, r } => ((x - c.0).hypot(y - c.1)) - r,
            Shape::Ring { c, r, half_w } => (((x - c.0).hypot(y - c.1)) - r).abs() - half_w,
            Shape::Ellipse { c, rx, ry } => ellipse_sdf(x - c.0, y - c.1, rx, ry),
            Shape::Segment { a, b, half_w } => segment_dist(x, y, a, b) - half_w,
        }
    }
}

/// Approximate ellipse SDF via first-order normalization of the implicit
/// function; exact enough for one-pixel anti-aliasing.
fn ellipse_sdf(dx: f64, dy: f64, rx: f64, ry: f64) -> f64 {
    let g = ((dx / rx) * (dx / rx) + (dy / ry) * (dy / ry)).sqrt();
    if g < 1e-9 {
        return -rx.min(ry);
    }
    let grad =
        ((dx / (rx * rx)) * (dx / (rx * rx)) + (dy / (ry * ry)) * (dy / (ry * ry))).sqrt() / g;
    (g - 1.0) / grad.max(1e-9)
}

fn segment_dist(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (px, py) = (x - a.0, y - a.1);
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (px - t * vx).hypot(py - t * vy)
}

fn coverage(sdf: f64) -> f64 {
    (0.5 - sdf).clamp(0.0, 1.0)
}

fn raster(sdf: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((IMG_SIZE, IMG_SIZE), |(row, col)| {
        let x = col as f64 + 0.5;
        let y = row as f64 + 0.5;
        coverage(sdf(x, y))
    })
}

fn union(shapes: &[Shape]) -> impl Fn(f64, f64) -> f64 + '_ {
    move |x, y| {
        shapes
            .iter()
            .map(|s| s.sdf(x, y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Derived geometry shared by several layers.
struct Geometry {
    face_cx: f64,
    face_cy: f64,
    /// Face half-width without the chubby factor.
    base_w: f64,
    face_ry: f64,
    eye_y: f64,
    eye_dx: f64,
    hairline: f64,
}

fn geometry(identity: &Identity) -> Geometry {
    let base_w = 16.0 * identity.face_width_ratio;
    let eye_y = 13.0 + identity.eye_height * IMG_SIZE as f64;
    Geometry {
        face_cx: 16.0,
        face_cy: 17.2,
        base_w,
        face_ry: 11.0,
        eye_y,
        eye_dx: identity.eye_spacing * base_w,
        hairline: eye_y - 2.6,
    }
}

const CHUBBY_FACTOR: f64 = 1.16;

/// Renders all layers bottom-to-top. The composited image is their
/// alpha-blend in order.
pub fn render_layers(identity: &Identity, attrs: &AttributeVector) -> Vec<Layer> {
    let g = geometry(identity);
    let skin = skin_color(identity);
    let dark_skin = [skin[0] * 0.62, skin[1] * 0.62, skin[2] * 0.62];
    let mut layers = Vec::with_capacity(10);

    layers.push(Layer {
        kind: LayerKind::Background,
        color: BACKGROUND,
        alpha: Array2::ones((IMG_SIZE, IMG_SIZE)),
    });

    // Face: the only chubby-dependent layer.
    let face_rx = g.base_w * if attrs.chubby { CHUBBY_FACTOR } else { 1.0 };
    let face = Shape::Ellipse {
        c: (g.face_cx, g.face_cy),
        rx: face_rx,
        ry: g.face_ry,
    };
    layers.push(Layer {
        kind: LayerKind::Face,
        color: skin,
        alpha: raster(|x, y| face.sdf(x, y)),
    });

    // Forehead wrinkles, old age only.
    let wrinkle_alpha = if attrs.age_band == AgeBand::Old {
        let s1 = Shape::Segment {
            a: (12.2, g.eye_y - 1.9),
            b: (15.0, g.eye_y - 2.2),
            half_w: 0.45,
        };
        let s2 = Shape::Segment {
            a: (17.0, g.eye_y - 2.2),
            b: (19.8, g.eye_y - 1.9),
            half_w: 0.45,
        };
        raster(union(&[s1, s2]))
    } else {
        Array2::zeros((IMG_SIZE, IMG_SIZE))
    };
    layers.push(Layer {
        kind: LayerKind::Wrinkles,
        color: dark_skin,
        alpha: wrinkle_alpha,
    });

    // Nose.
    let nose_len = identity.nose_length * IMG_SIZE as f64;
    let nose = Shape::Segment {
        a: (g.face_cx, g.eye_y + 1.6),
        b: (g.face_cx, g.eye_y + 1.6 + nose_len),
        half_w: 0.55,
    };
    layers.push(Layer {
        kind: LayerKind::Nose,
        color: dark_skin,
        alpha: raster(|x, y| nose.sdf(x, y)),
    });

    // Eyes.
    let left = (g.face_cx - g.eye_dx, g.eye_y);
    let right = (g.face_cx + g.eye_dx, g.eye_y);
    let whites = [
        Shape::Circle { c: left, r: 1.7 },
        Shape::Circle { c: right, r: 1.7 },
    ];
    layers.push(Layer {
        kind: LayerKind::EyeWhites,
        color: EYE_WHITE,
        alpha: raster(union(&whites)),
    });
    let pupils = [
        Shape::Circle { c: left, r: 0.85 },
        Shape::Circle { c: right, r: 0.85 },
    ];
    layers.push(Layer {
        kind: LayerKind::Pupils,
        color: PUPIL,
        alpha: raster(union(&pupils)),
    });

    // Glasses: two stroked rings plus bridge and arms.
    let glasses_alpha = if attrs.glasses {
        let r = 2.7;
        let shapes = [
            Shape::Ring {
                c: left,
                r,
                half_w: 0.9,
            },
            Shape::Ring {
                c: right,
                r,
                half_w: 0.9,
            },
            Shape::Segment {
                a: (left.0 + r, g.eye_y),
                b: (right.0 - r, g.eye_y),
                half_w: 0.55,
            },
            Shape::Segment {
                a: (left.0 - r, g.eye_y),
                b: (g.face_cx - g.base_w - 0.4, g.eye_y - 0.6),
                half_w: 0.5,
            },
            Shape::Segment {
                a: (right.0 + r, g.eye_y),
                b: (g.face_cx + g.base_w + 0.4, g.eye_y - 0.6),
                half_w: 0.5,
            },
        ];
        raster(union(&shapes))
    } else {
        Array2::zeros((IMG_SIZE, IMG_SIZE))
    };
    layers.push(Layer {
        kind: LayerKind::Glasses,
        color: GLASSES_COLOR,
        alpha: glasses_alpha,
    });

    // Beard: chin band between the base face ellipse and a shrunk copy,
    // independent of the chubby factor so it stays inside both face widths.
    let beard_alpha = if attrs.beard {
        let outer = Shape::Ellipse {
            c: (g.face_cx, g.face_cy),
            rx: g.base_w,
            ry: g.face_ry,
        };
        let inner = Shape::Ellipse {
            c: (g.face_cx, g.face_cy),
            rx: g.base_w * 0.72,
            ry: g.face_ry * 0.80,
        };
        let y_top = 25.2;
        raster(move |x, y| outer.sdf(x, y).max(-inner.sdf(x, y)).max(y_top - y))
    } else {
        Array2::zeros((IMG_SIZE, IMG_SIZE))
    };
    layers.push(Layer {
        kind: LayerKind::Beard,
        color: BEARD_COLOR,
        alpha: beard_alpha,
    });

    // Mouth: parabolic polyline; smiling curves the corners up, sad is the
    // mirror image, neutral is straight.
    let curv = match attrs.expression {
        Expression::Smiling => 2.2,
        Expression::Neutral => 0.0,
        Expression::Sad => -2.2,
    };
    let mouth_y = 23.8;
    let hw = 4.3;
    let n_seg = 12;
    let mouth_pts: Vec<(f64, f64)> = (0..=n_seg)
        .map(|i| {
            let xp = -hw + 2.0 * hw * i as f64 / n_seg as f64;
            let yp = mouth_y + curv * (1.0 - (xp / hw) * (xp / hw)) - curv / 2.0;
            (g.face_cx + xp, yp)
        })
        .collect();
    let mouth_shapes: Vec<Shape> = mouth_pts
        .windows(2)
        .map(|w| Shape::Segment {
            a: w[0],
            b: w[1],
            half_w: 0.8,
        })
        .collect();
    layers.push(Layer {
        kind: LayerKind::Mouth,
        color: MOUTH_COLOR,
        alpha: raster(union(&mouth_shapes)),
    });

    // Hair: a cap above the hairline, plus a frame ring down the face sides
    // for style B. Geometry ignores the chubby factor.
    let outer = Shape::Ellipse {
        c: (g.face_cx, 16.2),
        rx: g.base_w + 1.8,
        ry: 12.4,
    };
    let inner = Shape::Ellipse {
        c: (g.face_cx, 16.5),
        rx: (g.base_w - 1.0).max(2.0),
        ry: 9.6,
    };
    let hairline = g.hairline;
    let style_b = attrs.gender_style == GenderStyle::B;
    let hair_alpha = raster(move |x, y| {
        let cap = outer.sdf(x, y).max(y - hairline);
        if style_b {
            let ring = outer.sdf(x, y).max(-inner.sdf(x, y)).max(y - 24.0);
            cap.min(ring)
        } else {
            cap
        }
    });
    let mut hair_color = hair_base_color(attrs.hair_color);
    if attrs.age_band == AgeBand::Old {
        hair_color = lerp3(hair_color, GRAY_HAIR, 0.6);
    }
    layers.push(Layer {
        kind: LayerKind::Hair,
        color: hair_color,
        alpha: hair_alpha,
    });

    layers
}

fn composite(layers: &[Layer]) -> Array3<f64> {
    let mut img = Array3::zeros((3, IMG_SIZE, IMG_SIZE));
    for layer in layers {
        for row in 0..IMG_SIZE {
            for col in 0..IMG_SIZE {
                let a = layer.alpha[[row, col]];
                if a > 0.0 {
                    for ch in 0..3 {
                        let dst = img[[ch, row, col]];
                        img[[ch, row, col]] = a * layer.color[ch] + (1.0 - a) * dst;
                    }
                }
            }
        }
    }
    img
}

fn quantize(img: &Array3<f64>) -> Array3<f64> {
    img.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Deterministic rasterization quantized to 8-bit levels, so the on-disk PNG
/// round-trips the in-memory pixels exactly.
pub fn render(identity: &Identity, attrs: &AttributeVector) -> Array3<f64> {
    quantize(&composite(&render_layers(identity, attrs)))
}

/// Exact superset of the pixels that may differ between renders of `a` and
/// `b` for the same identity: the union of the supports of every layer whose
/// color or coverage differs.
pub fn attribute_mask(
    identity: &Identity,
    a: &AttributeVector,
    b: &AttributeVector,
) -> Array2<bool> {
    let la = render_layers(identity, a);
    let lb = render_layers(identity, b);
    let mut mask = Array2::from_elem((IMG_SIZE, IMG_SIZE), false);
    for (layer_a, layer_b) in la.iter().zip(&lb) {
        debug_assert_eq!(layer_a.kind, layer_b.kind);
        let color_differs = layer_a.color != layer_b.color;
        for row in 0..IMG_SIZE {
            for col in 0..IMG_SIZE {
                let aa = layer_a.alpha[[row, col]];
                let ab = layer_b.alpha[[row, col]];
                if aa != ab || (color_differs && (aa > 0.0 || ab > 0.0)) {
                    mask[[row, col]] = true;
                }
            }
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Corpus(format!("unknown split {other:?}"))),
        }
    }
}

/// One corpus row: image, provenance and caption.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub identity: Identity,
    pub attributes: AttributeVector,
    pub caption: CaptionTokens,
    pub split: Split,
    pub variant: usize,
}

impl Sample {
    pub fn file_name(&self) -> String {
        format!(
            "{}/{:05}_{}.png",
            self.split.as_str(),
            self.identity.identity_id,
            self.variant
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusConfig {
    pub n_train_identities: usize,
    pub n_eval_identities: usize,
    pub variants_per_identity: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train_identities: 2000,
            n_eval_identities: 64,
            variants_per_identity: 5,
            seed: 7,
        }
    }
}

/// In-memory corpus; images are exactly what [`render`] produces.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
}

pub const MANIFEST_HEADER: &str = "split\tidentity_id\tvariant\tfile\thair\tglasses\texpression\tage\tbeard\tchubby\tgender\tcaption\tface_width_ratio\teye_spacing\teye_height\tnose_length\tskin_tone_index\tbase_hue_jitter";

/// Corpus directory layout version; bump on any format change.
pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Builds the corpus deterministically: identity parameters and per-variant
/// attributes are seeded by stable hashes of (corpus seed, identity, variant),
/// so generation order and parallelism cannot change the result. Eval holds
/// out whole identities.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.n_train_identities < 1 || config.variants_per_identity < 1 {
        return Err(Error::Corpus("corpus must have at least one sample".into()));
    }
    let vocab = Vocabulary::default();
    let total_ids = config.n_train_identities + config.n_eval_identities;
    let jobs: Vec<(usize, usize)> = (0..total_ids)
        .flat_map(|id| (0..config.variants_per_identity).map(move |v| (id, v)))
        .collect();
    let samples: Vec<Sample> = jobs
        .par_iter()
        .map(|&(id, variant)| {
            let identity = identity_for(config.seed, id as u64);
            let attr_seed = stable_hash64(&[config.seed, identity.identity_id, variant as u64, 2]);
            let mut rng = ChaCha8Rng::seed_from_u64(attr_seed);
            let attributes = AttributeVector::sample(&mut rng);
            let caption = caption_of(&attributes, &vocab);
            let split = if id < config.n_train_identities {
                Split::Train
            } else {
                Split::Eval
            };
            Sample {
                image: render(&identity, &attributes),
                identity,
                attributes,
                caption,
                split,
                variant,
            }
        })
        .collect();
    Ok(Corpus {
        config: config.clone(),
        samples,
        vocab,
    })
}

fn identity_for(corpus_seed: u64, index: u64) -> Identity {
    let mut id = sample_identity(stable_hash64(&[corpus_seed, index, 1]));
    id.identity_id = index;
    id
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn eval(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split == Split::Eval)
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\n",
                s.split.as_str(),
                s.identity.identity_id,
                s.variant,
                s.file_name(),
                s.attributes.hair_color,
                if s.attributes.glasses { "yes" } else { "no" },
                s.attributes.expression,
                s.attributes.age_band,
                if s.attributes.beard { "yes" } else { "no" },
                if s.attributes.chubby { "yes" } else { "no" },
                s.attributes.gender_style,
                s.caption
                    .to_text(&self.vocab)
                    .expect("corpus captions are valid"),
                s.identity.face_width_ratio,
                s.identity.eye_spacing,
                s.identity.eye_height,
                s.identity.nose_length,
                s.identity.skin_tone_index,
                s.identity.base_hue_jitter,
            ));
        }
        out
    }

    /// Digest over the manifest and every image, in manifest order.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(self.manifest_text().as_bytes());
        for s in &self.samples {
            for v in s.image.iter() {
                bytes.push((v * 255.0).round() as u8);
            }
        }
        sha256_hex(&bytes)
    }

    /// Writes images, manifest, vocabulary and a meta file under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for split in ["train", "eval"] {
            fs::create_dir_all(dir.join(split)).map_err(|e| Error::io(dir.join(split), e))?;
        }
        self.samples
            .par_iter()
            .map(|s| save_png(&dir.join(s.file_name()), &s.image))
            .collect::<Result<Vec<_>>>()?;
        fs::write(dir.join("manifest.tsv"), self.manifest_text())
            .map_err(|e| Error::io(dir.join("manifest.tsv"), e))?;
        fs::write(dir.join("vocab.txt"), self.vocab.to_file_string())
            .map_err(|e| Error::io(dir.join("vocab.txt"), e))?;
        let meta = format!(
            "format_version={}\nseed={}\nn_train_identities={}\nn_eval_identities={}\nvariants_per_identity={}\ndigest={}\n",
            CORPUS_FORMAT_VERSION,
            self.config.seed,
            self.config.n_train_identities,
            self.config.n_eval_identities,
            self.config.variants_per_identity,
            self.digest(),
        );
        fs::write(dir.join("meta.txt"), meta).map_err(|e| Error::io(dir.join("meta.txt"), e))
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let meta_path = dir.join("meta.txt");
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BTreeMap<String, String> = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let get = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| Error::Corpus(format!("meta.txt missing key {k}")))
        };
        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::Corpus("bad format_version".into()))?;
        if version != CORPUS_FORMAT_VERSION {
            return Err(Error::Corpus(format!(
                "unsupported corpus format version {version}"
            )));
        }
        let config = CorpusConfig {
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Corpus("bad seed".into()))?,
            n_train_identities: get("n_train_identities")?
                .parse()
                .map_err(|_| Error::Corpus("bad n_train_identities".into()))?,
            n_eval_identities: get("n_eval_identities")?
                .parse()
                .map_err(|_| Error::Corpus("bad n_eval_identities".into()))?,
            variants_per_identity: get("variants_per_identity")?
                .parse()
                .map_err(|_| Error::Corpus("bad variants_per_identity".into()))?,
        };
        let vocab_path = dir.join("vocab.txt");
        let vocab = Vocabulary::from_file_string(
            &fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?,
        )?;
        let manifest_path = dir.join("manifest.tsv");
        let manifest =
            fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut lines = manifest.lines();
        let header = lines.next().unwrap_or("");
        if header != MANIFEST_HEADER {
            return Err(Error::Corpus("manifest header mismatch".into()));
        }
        let rows: Vec<&str> = lines.collect();
        let samples: Vec<Sample> = rows
            .par_iter()
            .map(|line| parse_manifest_row(line, dir, &vocab))
            .collect::<Result<_>>()?;
        let corpus = Corpus {
            config,
            samples,
            vocab,
        };
        let expect = get("digest")?;
        let got = corpus.digest();
        if *expect != got {
            return Err(Error::DigestMismatch {
                path: dir.to_path_buf(),
                expected: expect.clone(),
                got,
            });
        }
        Ok(corpus)
    }
}

fn parse_manifest_row(line: &str, dir: &Path, vocab: &Vocabulary) -> Result<Sample> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 18 {
        return Err(Error::Corpus(format!(
            "manifest row has {} columns, expected 18",
            cols.len()
        )));
    }
    let split = Split::parse(cols[0])?;
    let bad = |what: &str| Error::Corpus(format!("bad {what} in manifest row"));
    let identity = Identity {
        identity_id: cols[1].parse().map_err(|_| bad("identity_id"))?,
        face_width_ratio: cols[12].parse().map_err(|_| bad("face_width_ratio"))?,
        eye_spacing: cols[13].parse().map_err(|_| bad("eye_spacing"))?,
        eye_height: cols[14].parse().map_err(|_| bad("eye_height"))?,
        nose_length: cols[15].parse().map_err(|_| bad("nose_length"))?,
        skin_tone_index: cols[16].parse().map_err(|_| bad("skin_tone_index"))?,
        base_hue_jitter: cols[17].parse().map_err(|_| bad("base_hue_jitter"))?,
    };
    let attributes = AttributeVector {
        hair_color: HairColor::from_word(cols[4]).ok_or_else(|| bad("hair"))?,
        glasses: cols[5] == "yes",
        expression: Expression::from_word(cols[6]).ok_or_else(|| bad("expression"))?,
        age_band: AgeBand::from_word(cols[7]).ok_or_else(|| bad("age"))?,
        beard: cols[8] == "yes",
        chubby: cols[9] == "yes",
        gender_style: GenderStyle::from_word(cols[10]).ok_or_else(|| bad("gender"))?,
    };
    let caption = CaptionTokens::parse(cols[11], vocab)?;
    if caption != caption_of(&attributes, vocab) {
        return Err(Error::Corpus(format!(
            "caption does not match attributes in row for {}",
            cols[3]
        )));
    }
    let variant: usize = cols[2].parse().map_err(|_| bad("variant"))?;
    let image = load_png(&dir.join(cols[3]))?;
    Ok(Sample {
        image,
        identity,
        attributes,
        caption,
        split,
        variant,
    })
}

/// Saves a [0,1] channels-first image as 8-bit RGB PNG.
pub fn save_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let px = [
                (image[[0, row, col]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[1, row, col]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[2, row, col]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(col as u32, row as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// Loads an 8-bit RGB PNG to a [0,1] channels-first array.
pub fn load_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_attrs() -> AttributeVector {
        AttributeVector {
            hair_color: HairColor::Black,
            glasses: false,
            expression: Expression::Neutral,
            age_band: AgeBand::Young,
            beard: false,
            chubby: false,
            gender_style: GenderStyle::A,
        }
    }

    #[test]
    fn identity_sampling_is_deterministic_and_in_range() {
        let a = sample_identity(123);
        let b = sample_identity(123);
        assert_eq!(a, b);
        for seed in 0..10_000u64 {
            assert!(sample_identity(seed).in_ranges(), "seed {seed} out of range");
        }
    }

    #[test]
    fn identity_seeds_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..1000u64 {
            let id = sample_identity(seed);
            let key = format!(
                "{:.15}|{:.15}|{:.15}|{:.15}|{:.15}|{:.15}",
                id.face_width_ratio,
                id.eye_spacing,
                id.eye_height,
                id.nose_length,
                id.skin_tone_index,
                id.base_hue_jitter
            );
            assert!(seen.insert(key), "parameter collision at seed {seed}");
        }
    }

    #[test]
    fn render_is_deterministic_and_in_unit_range() {
        let id = sample_identity(5);
        let attrs = base_attrs();
        let a = render(&id, &attrs);
        let b = render(&id, &attrs);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.dim(), (3, IMG_SIZE, IMG_SIZE));
    }

    fn diff_pixels(a: &Array3<f64>, b: &Array3<f64>) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for row in 0..IMG_SIZE {
            for col in 0..IMG_SIZE {
                if (0..3).any(|ch| a[[ch, row, col]] != b[[ch, row, col]]) {
                    out.push((row, col));
                }
            }
        }
        out
    }

    fn assert_flip_confined(field: AttrField, mutate: impl Fn(&mut AttributeVector)) {
        for seed in [1u64, 42, 77, 2024] {
            let id = sample_identity(seed);
            for base in [base_attrs(), {
                let mut a = base_attrs();
                a.gender_style = GenderStyle::B;
                a.age_band = AgeBand::Old;
                a.glasses = true;
                a
            }] {
                let mut flipped = base;
                mutate(&mut flipped);
                let img_a = render(&id, &base);
                let img_b = render(&id, &flipped);
                let mask = attribute_mask(&id, &base, &flipped);
                let diffs = diff_pixels(&img_a, &img_b);
                assert!(
                    !diffs.is_empty(),
                    "{field:?} flip had no visible effect (seed {seed})"
                );
                for (row, col) in diffs {
                    assert!(
                        mask[[row, col]],
                        "{field:?} flip changed ({row},{col}) outside its mask (seed {seed})"
                    );
                }
            }
        }
    }

    #[test]
    fn hair_color_flip_is_confined_to_hair_mask() {
        assert_flip_confined(AttrField::Hair, |a| a.hair_color = HairColor::Blonde);
    }

    #[test]
    fn glasses_flip_is_confined_and_removes_frame_pixels() {
        assert_flip_confined(AttrField::Glasses, |a| a.glasses = !a.glasses);
        // Frames are pure black by construction and nothing else is.
        for seed in [3u64, 9, 100] {
            let id = sample_identity(seed);
            let mut with = base_attrs();
            with.glasses = true;
            let mut without = with;
            without.glasses = false;
            let count_black = |img: &Array3<f64>| {
                let mut n = 0;
                for row in 0..IMG_SIZE {
                    for col in 0..IMG_SIZE {
                        if (0..3).all(|ch| img[[ch, row, col]] == 0.0) {
                            n += 1;
                        }
                    }
                }
                n
            };
            assert!(
                count_black(&render(&id, &with)) > 0,
                "seed {seed}: no frame core pixels"
            );
            assert_eq!(count_black(&render(&id, &without)), 0, "seed {seed}");
        }
    }

    #[test]
    fn expression_flip_is_confined_to_mouth_mask() {
        assert_flip_confined(AttrField::Expression, |a| {
            a.expression = Expression::Smiling
        });
    }

    #[test]
    fn age_flip_is_confined_to_hair_and_wrinkles() {
        assert_flip_confined(AttrField::Age, |a| {
            a.age_band = match a.age_band {
                AgeBand::Young => AgeBand::Old,
                AgeBand::Old => AgeBand::Young,
            }
        });
    }

    #[test]
    fn beard_chubby_gender_flips_are_confined() {
        assert_flip_confined(AttrField::Beard, |a| a.beard = !a.beard);
        assert_flip_confined(AttrField::Chubby, |a| a.chubby = !a.chubby);
        assert_flip_confined(AttrField::Gender, |a| {
            a.gender_style = match a.gender_style {
                GenderStyle::A => GenderStyle::B,
                GenderStyle::B => GenderStyle::A,
            }
        });
    }

    #[test]
    fn captions_are_injective_over_all_combinations() {
        let vocab = Vocabulary::default();
        let all = AttributeVector::enumerate_all();
        assert_eq!(all.len(), 384);
        let mut seen = std::collections::HashMap::new();
        for attrs in &all {
            let caption = caption_of(attrs, &vocab);
            if let Some(prev) = seen.insert(caption, *attrs) {
                panic!("caption collision between {prev:?} and {attrs:?}");
            }
            // Round-trips through the parser; deterministic.
            let parsed = attributes_from_caption(&caption, &vocab).unwrap();
            assert_eq!(parsed, *attrs);
            assert_eq!(caption, caption_of(attrs, &vocab));
        }
    }

    #[test]
    fn corpus_build_counts_and_split_disjointness() {
        let config = CorpusConfig {
            n_train_identities: 12,
            n_eval_identities: 4,
            variants_per_identity: 3,
            seed: 99,
        };
        let corpus = build_corpus(&config).unwrap();
        assert_eq!(corpus.samples.len(), (12 + 4) * 3);
        assert_eq!(corpus.train().count(), 36);
        assert_eq!(corpus.eval().count(), 12);
        let train_ids: std::collections::HashSet<u64> =
            corpus.train().map(|s| s.identity.identity_id).collect();
        let eval_ids: std::collections::HashSet<u64> =
            corpus.eval().map(|s| s.identity.identity_id).collect();
        assert!(train_ids.is_disjoint(&eval_ids));
        // Sample invariants hold.
        for s in &corpus.samples {
            assert_eq!(s.caption, caption_of(&s.attributes, &corpus.vocab));
            assert_eq!(s.image, render(&s.identity, &s.attributes));
        }
    }

    #[test]
    fn corpus_rebuild_is_byte_identical() {
        let config = CorpusConfig {
            n_train_identities: 6,
            n_eval_identities: 2,
            variants_per_identity: 2,
            seed: 5,
        };
        let a = build_corpus(&config).unwrap();
        let b = build_corpus(&config).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.manifest_text(), b.manifest_text());
    }

    #[test]
    fn corpus_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let config = CorpusConfig {
            n_train_identities: 5,
            n_eval_identities: 2,
            variants_per_identity: 2,
            seed: 11,
        };
        let corpus = build_corpus(&config).unwrap();
        corpus.save(dir.path()).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), corpus.samples.len());
        assert_eq!(loaded.digest(), corpus.digest());
        for (a, b) in corpus.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.image, b.image, "png roundtrip must be exact");
            assert_eq!(a.attributes, b.attributes);
            assert_eq!(a.identity, b.identity);
        }
    }

    #[test]
    fn ground_truth_edit_oracle_is_exact() {
        // The render of the edited attribute vector is the exact edit target.
        let id = sample_identity(31);
        let attrs = base_attrs();
        let mut edited = attrs;
        edited.hair_color = HairColor::Pink;
        let target = render(&id, &edited);
        assert_eq!(target, render(&id, &edited));
        assert_ne!(render(&id, &attrs), target);
    }
}
