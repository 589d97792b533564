//! Rasterizing a synthetic face: base features from the landmarks plus one
//! oriented, Gaussian-windowed grating per active AU at each of its regions.

use crate::roi_geometry::{compute_au_centers, ImageSize, LandmarkSet, Point, RuleTable};

/// Per-AU appearance: grating orientation (radians, image-left side) and
/// landmark displacements `(index, dx, dy)` in inter-ocular units at full
/// activation. Mirror partners are displaced with dx negated.
pub struct AuAppearance {
    pub orientation: f64,
    pub moves: &'static [(usize, f64, f64)],
}

const DEG: f64 = std::f64::consts::PI / 180.0;

/// Orientations repeat across AUs (0, 45, 90, 135 degrees), so an AU is
/// identified by where its grating appears, not by which grating it is.
pub fn au_appearance(au: u32) -> AuAppearance {
    let (deg, moves): (f64, &'static [(usize, f64, f64)]) = match au {
        1 => (0.0, &[(20, 0.0, -0.06), (21, 0.0, -0.07)]),
        2 => (90.0, &[(17, 0.0, -0.07), (18, 0.0, -0.06)]),
        4 => (45.0, &[(19, 0.0, 0.04), (20, 0.02, 0.05), (21, 0.03, 0.05)]),
        6 => (135.0, &[(40, 0.0, -0.03), (41, 0.0, -0.03)]),
        7 => (0.0, &[(37, 0.0, 0.02), (38, 0.0, 0.02), (40, 0.0, -0.02), (41, 0.0, -0.02)]),
        10 => (90.0, &[(49, 0.0, -0.04), (50, 0.0, -0.04), (51, 0.0, -0.04), (61, 0.0, -0.03), (62, 0.0, -0.03)]),
        12 => (45.0, &[(48, -0.05, -0.04), (60, -0.04, -0.03)]),
        14 => (135.0, &[(48, -0.03, 0.0)]),
        15 => (0.0, &[(48, 0.0, 0.04), (60, 0.0, 0.03)]),
        17 => (90.0, &[(7, 0.0, -0.03), (8, 0.0, -0.03), (57, 0.0, -0.02), (58, 0.0, -0.02)]),
        23 => (45.0, &[(48, 0.03, 0.0), (60, 0.02, 0.0)]),
        24 => (135.0, &[(51, 0.0, 0.02), (62, 0.0, 0.015), (57, 0.0, -0.02), (66, 0.0, -0.015)]),
        other => ((other as f64 * 37.0) % 180.0, &[]),
    };
    AuAppearance {
        orientation: deg * DEG,
        moves,
    }
}

/// Everything needed to render one frame before noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// True (posed, deformed) landmark positions in pixels.
    pub landmarks: Vec<Point>,
    /// Latent activation per AU in `[0, 1]`.
    pub latent: Vec<f64>,
    /// Per-AU amplitude multiplier for this frame.
    pub gains: Vec<f64>,
    pub skin: f64,
    pub background: f64,
    pub brightness: f64,
}

/// Grating parameters shared by every AU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternStyle {
    pub amplitude: f64,
    pub sigma: f64,
    pub period: f64,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: ImageSize, fill: f64) -> Self {
        Canvas {
            w: size.width,
            h: size.height,
            px: vec![fill; size.width * size.height],
        }
    }

    fn for_each(&mut self, mut f: impl FnMut(f64, f64, &mut f64)) {
        for y in 0..self.h {
            for x in 0..self.w {
                f(x as f64, y as f64, &mut self.px[y * self.w + x]);
            }
        }
    }

    /// Soft stroke along a polyline: `delta * max(0, 1 - dist / width)`.
    fn stroke(&mut self, pts: &[Point], width: f64, delta: f64) {
        self.for_each(|x, y, v| {
            let d = pts
                .windows(2)
                .map(|s| segment_distance(Point::new(x, y), s[0], s[1]))
                .fold(f64::INFINITY, f64::min);
            *v += delta * (1.0 - d / width).max(0.0);
        });
    }

    fn fill(&mut self, poly: &[Point], delta: f64) {
        self.for_each(|x, y, v| {
            if inside(Point::new(x, y), poly) {
                *v += delta;
            }
        });
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

fn inside(p: Point, poly: &[Point]) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            hit = !hit;
        }
        j = i;
    }
    hit
}

fn pick(l: &[Point], idx: impl IntoIterator<Item = usize>) -> Vec<Point> {
    idx.into_iter().map(|i| l[i]).collect()
}

/// Face without AU gratings and without the frame brightness offset.
pub fn render_base(scene: &Scene, size: ImageSize) -> Vec<f64> {
    let l = &scene.landmarks;
    let mut c = Canvas::new(size, scene.background);
    // face oval from the jaw line, closed over the forehead
    let mut oval = pick(l, 0..17);
    let top = l[19].y.min(l[24].y) - 0.35 * (l[8].y - l[19].y);
    oval.push(Point::new(l[16].x, top));
    oval.push(Point::new(l[0].x, top));
    c.fill(&oval, scene.skin - scene.background);
    c.stroke(&pick(l, 17..22), 1.4, -0.25);
    c.stroke(&pick(l, 22..27), 1.4, -0.25);
    c.fill(&pick(l, 36..42), -0.3);
    c.fill(&pick(l, 42..48), -0.3);
    c.stroke(&pick(l, 27..31), 1.0, -0.08);
    c.stroke(&pick(l, 31..36), 1.0, -0.15);
    c.fill(&pick(l, 48..60), -0.15);
    let mut inner = pick(l, 60..68);
    inner.push(l[60]);
    c.stroke(&inner, 1.0, -0.12);
    c.px
}

/// Unit-amplitude grating sum for one AU: one windowed grating at each of
/// its regions' centers (mirror partners get the mirrored orientation).
pub fn au_template(
    landmarks: &LandmarkSet,
    au: u32,
    rules: &RuleTable,
    size: ImageSize,
    style: &PatternStyle,
) -> Vec<f64> {
    let mut out = vec![0.0; size.width * size.height];
    let centers = match compute_au_centers(landmarks, rules, size) {
        Ok(c) => c,
        Err(_) => return out,
    };
    let base = au_appearance(au).orientation;
    let freq = 2.0 * std::f64::consts::PI / style.period;
    let two_s2 = 2.0 * style.sigma * style.sigma;
    let reach = (3.0 * style.sigma).ceil() as isize;
    for region in rules.regions_for_au(au) {
        let ctr = centers.centers()[region];
        // regions right of the face midline are the mirrored partners
        let mid = 0.5 * (landmarks.points()[36].x + landmarks.points()[45].x);
        let theta = if ctr.x > mid + 0.5 { std::f64::consts::PI - base } else { base };
        let (ux, uy) = (theta.cos(), theta.sin());
        let (cx, cy) = (ctr.x.round() as isize, ctr.y.round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(size.height as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(size.width as isize - 1) {
                let (dx, dy) = (x as f64 - ctr.x, y as f64 - ctr.y);
                let env = (-(dx * dx + dy * dy) / two_s2).exp();
                out[y as usize * size.width + x as usize] += env * (freq * (dx * ux + dy * uy)).cos();
            }
        }
    }
    out
}

/// Noise-free image: base face, brightness offset and the gratings of every
/// AU scaled by `amplitude * latent * gain`.
pub fn render_clean(scene: &Scene, aus: &[u32], rules: &RuleTable, size: ImageSize, style: &PatternStyle) -> Vec<f64> {
    let mut img = render_base(scene, size);
    img.iter_mut().for_each(|v| *v += scene.brightness);
    let lm = LandmarkSet::new(scene.landmarks.clone(), size).expect("finite landmarks");
    for (a, &au) in aus.iter().enumerate() {
        let k = style.amplitude * scene.latent[a] * scene.gains[a];
        if k == 0.0 {
            continue;
        }
        for (v, t) in img.iter_mut().zip(au_template(&lm, au, rules, size, style)) {
            *v += k * t;
        }
    }
    img
}
