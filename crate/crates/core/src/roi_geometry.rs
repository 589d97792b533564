//! Landmarks to AU-region centers, and centers to crop windows on the
//! convolutional feature grid.

use std::fmt;
use std::path::Path;

/// The 12 AUs modeled by default, in column order of label matrices.
pub const DEFAULT_AUS: [u32; 12] = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24];

/// Number of regions of interest cropped per face.
pub const NUM_REGIONS: usize = 20;

pub const DEFAULT_RULES_V1: &str = include_str!("../data/au_rules_v1.txt");

/// Left/right correspondence of the 68-point layout: `MIRROR_68[i]` is the
/// index of the point that lands on `i` after a horizontal flip.
pub const MIRROR_68: [usize; 68] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, // jaw
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, // brows
    27, 28, 29, 30, // nose bridge
    35, 34, 33, 32, 31, // nostrils
    45, 44, 43, 42, 47, 46, // right eye -> left eye
    39, 38, 37, 36, 41, 40, // left eye -> right eye
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, // outer lip
    64, 63, 62, 61, 60, 67, 66, 65, // inner lip
];

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate landmarks: inter-ocular distance is zero")]
    DegenerateLandmarks,
    #[error("landmark index {index} out of range for a {size}-point set")]
    LandmarkIndex { index: usize, size: usize },
    #[error("window size {window} does not fit a {rows}x{cols} grid")]
    WindowTooLarge { window: usize, rows: usize, cols: usize },
    #[error("rule table line {line}: {msg}")]
    RuleSyntax { line: usize, msg: String },
    #[error("rule table invalid: {0}")]
    RuleTable(String),
    #[error("non-finite landmark coordinate at point {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Image extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl ImageSize {
    pub fn square(side: usize) -> Self {
        ImageSize {
            height: side,
            width: side,
        }
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point {
            x: p.x.clamp(0.0, (self.width - 1) as f64),
            y: p.y.clamp(0.0, (self.height - 1) as f64),
        }
    }
}

/// Spatial extent of a feature map in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSize {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    /// Builds a set, clamping every point into the image.
    pub fn new(points: Vec<Point>, image: ImageSize) -> Result<Self, GeometryError> {
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(LandmarkSet {
            points: points.into_iter().map(|p| image.clamp(p)).collect(),
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn schema_size(&self) -> usize {
        self.points.len()
    }

    pub fn get(&self, index: usize) -> Result<Point, GeometryError> {
        self.points
            .get(index)
            .copied()
            .ok_or(GeometryError::LandmarkIndex {
                index,
                size: self.points.len(),
            })
    }

    /// Horizontal flip about the image center, relabeling points with `mirror`
    /// so that the result is again a valid face in the same layout.
    pub fn mirrored(&self, image: ImageSize, mirror: &[usize]) -> LandmarkSet {
        let w = (image.width - 1) as f64;
        LandmarkSet {
            points: mirror
                .iter()
                .map(|&src| {
                    let p = self.points[src];
                    Point::new(w - p.x, p.y)
                })
                .collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> LandmarkSet {
        LandmarkSet {
            points: self
                .points
                .iter()
                .map(|p| Point::new(p.x * factor, p.y * factor))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuCenterRule {
    pub rule_id: usize,
    pub base_landmark: usize,
    /// (dx, dy) in inter-ocular units
    pub offset: (f64, f64),
    pub au_links: Vec<u32>,
    pub symmetry_partner: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleTable {
    pub version: u32,
    /// Landmarks whose distance defines the inter-ocular unit.
    pub eye_corners: (usize, usize),
    rules: Vec<AuCenterRule>,
}

impl RuleTable {
    /// Shipped table for the 68-point layout and the 12 default AUs.
    pub fn default_v1() -> Self {
        RuleTable::parse(DEFAULT_RULES_V1).expect("shipped rule table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        RuleTable::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses the text format: `rule_id base_landmark dx dy au_list symmetry_partner`
    /// per line, `-` for no partner, plus `version N` and `eyes A B` directives.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut version = None;
        let mut eyes = None;
        let mut rules = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let syntax = |msg: String| GeometryError::RuleSyntax { line, msg };
            let num = |s: &str, what: &str| -> Result<usize, GeometryError> {
                s.parse::<usize>()
                    .map_err(|_| syntax(format!("bad {what} `{s}`")))
            };
            match fields[0] {
                "version" if fields.len() == 2 => {
                    version = Some(num(fields[1], "version")? as u32);
                }
                "eyes" if fields.len() == 3 => {
                    eyes = Some((num(fields[1], "eye index")?, num(fields[2], "eye index")?));
                }
                _ if fields.len() == 6 => {
                    let real = |s: &str| -> Result<f64, GeometryError> {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| syntax(format!("bad offset `{s}`")))
                    };
                    let au_links = fields[4]
                        .split(',')
                        .map(|a| {
                            a.parse::<u32>()
                                .map_err(|_| syntax(format!("bad AU `{a}`")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    let symmetry_partner = match fields[5] {
                        "-" => None,
                        p => Some(num(p, "partner")?),
                    };
                    rules.push(AuCenterRule {
                        rule_id: num(fields[0], "rule id")?,
                        base_landmark: num(fields[1], "landmark")?,
                        offset: (real(fields[2])?, real(fields[3])?),
                        au_links,
                        symmetry_partner,
                    });
                }
                _ => return Err(syntax(format!("expected 6 fields, got `{content}`"))),
            }
        }
        let table = RuleTable {
            version: version.ok_or_else(|| GeometryError::RuleTable("missing `version` line".into()))?,
            eye_corners: eyes.ok_or_else(|| GeometryError::RuleTable("missing `eyes` line".into()))?,
            rules,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::RuleTable(m));
        if self.rules.len() != NUM_REGIONS {
            return bad(format!("expected {NUM_REGIONS} rules, found {}", self.rules.len()));
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.rule_id != i + 1 {
                return bad(format!("rule ids must run 1..={NUM_REGIONS} in order, found {} at position {}", r.rule_id, i + 1));
            }
            if let Some(p) = r.symmetry_partner {
                let back = self.rules.get(p.wrapping_sub(1)).and_then(|q| q.symmetry_partner);
                if back != Some(r.rule_id) || p == r.rule_id {
                    return bad(format!("partner of rule {} is not mutual", r.rule_id));
                }
            }
            if r.au_links.is_empty() {
                return bad(format!("rule {} links no AU", r.rule_id));
            }
        }
        Ok(())
    }

    /// Checks that every AU in `aus` is served by at least one region.
    pub fn covers(&self, aus: &[u32]) -> Result<(), GeometryError> {
        match aus.iter().find(|a| self.regions_for_au(**a).is_empty()) {
            Some(au) => Err(GeometryError::RuleTable(format!("AU {au} is not linked by any rule"))),
            None => Ok(()),
        }
    }

    pub fn rules(&self) -> &[AuCenterRule] {
        &self.rules
    }

    /// Zero-based region indices that serve `au`, in rule order.
    pub fn regions_for_au(&self, au: u32) -> Vec<usize> {
        self.rules
            .iter()
            .enumerate()
            .filter(|(_, r)| r.au_links.contains(&au))
            .map(|(i, _)| i)
            .collect()
    }

    /// Gives every partnered rule its partner's landmark and offset, keeping the
    /// region order. Unpartnered rules sit on the midline and are mirrored in
    /// place. On a flipped face this table yields the flipped centers.
    pub fn partner_swapped(&self, mirror: &[usize]) -> RuleTable {
        let rules = self
            .rules
            .iter()
            .map(|r| {
                let (base_landmark, offset) = match r.symmetry_partner {
                    Some(p) => {
                        let src = &self.rules[p - 1];
                        (src.base_landmark, src.offset)
                    }
                    None => (mirror[r.base_landmark], (-r.offset.0, r.offset.1)),
                };
                AuCenterRule {
                    rule_id: r.rule_id,
                    base_landmark,
                    offset,
                    au_links: r.au_links.clone(),
                    symmetry_partner: r.symmetry_partner,
                }
            })
            .collect();
        RuleTable {
            version: self.version,
            eye_corners: self.eye_corners,
            rules,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiCenterSet {
    centers: Vec<Point>,
}

impl RoiCenterSet {
    pub fn centers(&self) -> &[Point] {
        &self.centers
    }
}

/// Inclusive cell bounds of a crop on the feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridWindow {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl GridWindow {
    pub fn origin(&self) -> (usize, usize) {
        (self.rows.0, self.cols.0)
    }

    pub fn height(&self) -> usize {
        self.rows.1 - self.rows.0 + 1
    }

    pub fn width(&self) -> usize {
        self.cols.1 - self.cols.0 + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.rows.0..=self.rows.1).contains(&row) && (self.cols.0..=self.cols.1).contains(&col)
    }
}

impl fmt::Display for GridWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rows [{},{}] cols [{},{}]",
            self.rows.0, self.rows.1, self.cols.0, self.cols.1
        )
    }
}

pub fn inter_ocular_distance(landmarks: &LandmarkSet, rules: &RuleTable) -> Result<f64, GeometryError> {
    let (a, b) = rules.eye_corners;
    Ok(landmarks.get(a)?.distance(landmarks.get(b)?))
}

/// center_i = base_i + offset_i * inter-ocular distance, clamped into the image.
pub fn compute_au_centers(
    landmarks: &LandmarkSet,
    rules: &RuleTable,
    image: ImageSize,
) -> Result<RoiCenterSet, GeometryError> {
    let iod = inter_ocular_distance(landmarks, rules)?;
    if iod <= 0.0 {
        return Err(GeometryError::DegenerateLandmarks);
    }
    let centers = rules
        .rules()
        .iter()
        .map(|r| {
            let base = landmarks.get(r.base_landmark)?;
            Ok(image.clamp(Point::new(
                base.x + r.offset.0 * iod,
                base.y + r.offset.1 * iod,
            )))
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(RoiCenterSet { centers })
}

/// (row, col) = (floor(y*h/H), floor(x*w/W)).
pub fn map_to_feature_grid(point: Point, image: ImageSize, grid: GridSize) -> (usize, usize) {
    let row = (point.y * grid.rows as f64 / image.height as f64).floor();
    let col = (point.x * grid.cols as f64 / image.width as f64).floor();
    (
        (row.max(0.0) as usize).min(grid.rows - 1),
        (col.max(0.0) as usize).min(grid.cols - 1),
    )
}

/// Full-size window around `center`, shifted inward at the grid edges.
pub fn crop_window(center: (usize, usize), window: usize, grid: GridSize) -> Result<GridWindow, GeometryError> {
    if window == 0 || window > grid.rows || window > grid.cols {
        return Err(GeometryError::WindowTooLarge {
            window,
            rows: grid.rows,
            cols: grid.cols,
        });
    }
    let start = |c: usize, extent: usize| c.saturating_sub(window / 2).min(extent - window);
    let r0 = start(center.0, grid.rows);
    let c0 = start(center.1, grid.cols);
    Ok(GridWindow {
        rows: (r0, r0 + window - 1),
        cols: (c0, c0 + window - 1),
    })
}

/// All 20 crop windows for one frame.
pub fn frame_windows(
    landmarks: &LandmarkSet,
    rules: &RuleTable,
    image: ImageSize,
    grid: GridSize,
    window: usize,
) -> Result<Vec<GridWindow>, GeometryError> {
    compute_au_centers(landmarks, rules, image)?
        .centers()
        .iter()
        .map(|&c| crop_window(map_to_feature_grid(c, image, grid), window, grid))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const IMG: ImageSize = ImageSize {
        height: 224,
        width: 224,
    };
    const GRID: GridSize = GridSize { rows: 14, cols: 14 };

    fn face(points: Vec<(f64, f64)>) -> LandmarkSet {
        LandmarkSet::new(points.into_iter().map(|(x, y)| Point::new(x, y)).collect(), IMG).unwrap()
    }

    /// 68 points with eye corners 40 px apart and point 21 at (100, 80).
    fn simple_face() -> LandmarkSet {
        let mut pts: Vec<(f64, f64)> = (0..68)
            .map(|i| (60.0 + (i % 10) as f64 * 10.0, 60.0 + (i / 10) as f64 * 12.0))
            .collect();
        pts[36] = (92.0, 90.0);
        pts[45] = (132.0, 90.0);
        pts[21] = (100.0, 80.0);
        face(pts)
    }

    #[test]
    fn default_table_covers_all_aus() {
        let t = RuleTable::default_v1();
        assert_eq!(t.rules().len(), 20);
        t.covers(&DEFAULT_AUS).unwrap();
        assert!(t.covers(&[9]).is_err());
        for au in DEFAULT_AUS {
            let n = t.regions_for_au(au).len();
            assert!((1..=2).contains(&n), "AU{au} has {n} regions");
        }
        assert_eq!(t.regions_for_au(12).len(), 2);
        assert_eq!(t.regions_for_au(17).len(), 1);
    }

    #[test]
    fn rule_offset_arithmetic() {
        let lm = simple_face();
        let text = DEFAULT_RULES_V1.replace("1 21 0.00 -0.15 1 2", "1 21 0.00 0.50 1 2");
        let table = RuleTable::parse(&text).unwrap();
        let c = compute_au_centers(&lm, &table, IMG).unwrap();
        assert_eq!(c.centers()[0], Point::new(100.0, 100.0));
        // rule 9 has zero offset: the center sits on landmark 40
        assert_eq!(c.centers()[8], lm.get(40).unwrap());
    }

    #[test]
    fn degenerate_eyes_rejected() {
        let mut pts: Vec<(f64, f64)> = (0..68).map(|i| (i as f64, 10.0)).collect();
        pts[45] = pts[36];
        let err = compute_au_centers(&face(pts), &RuleTable::default_v1(), IMG).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateLandmarks));
    }

    #[test]
    fn grid_mapping_examples() {
        assert_eq!(map_to_feature_grid(Point::new(0.0, 0.0), IMG, GRID), (0, 0));
        assert_eq!(map_to_feature_grid(Point::new(160.0, 96.0), IMG, GRID), (6, 10));
        assert_eq!(map_to_feature_grid(Point::new(223.0, 223.0), IMG, GRID), (13, 13));
    }

    #[test]
    fn crop_window_examples() {
        let w = crop_window((6, 10), 3, GRID).unwrap();
        assert_eq!((w.rows, w.cols), ((5, 7), (9, 11)));
        let w = crop_window((0, 0), 3, GRID).unwrap();
        assert_eq!((w.rows, w.cols), ((0, 2), (0, 2)));
        let w = crop_window((13, 13), 3, GRID).unwrap();
        assert_eq!((w.rows, w.cols), ((11, 13), (11, 13)));
        assert!(crop_window((0, 0), 15, GRID).is_err());
    }

    #[test]
    fn rule_table_rejects_broken_partners() {
        let text = DEFAULT_RULES_V1.replace("2 22 0.00 -0.15 1 1", "2 22 0.00 -0.15 1 3");
        assert!(matches!(
            RuleTable::parse(&text),
            Err(GeometryError::RuleTable(_))
        ));
        let text = DEFAULT_RULES_V1.replace("19 8 0.00 -0.15 17 -", "19 8 0.00 -0.15 x -");
        assert!(matches!(
            RuleTable::parse(&text),
            Err(GeometryError::RuleSyntax { line: 25, .. })
        ));
    }

    #[test]
    fn mirror_table_is_an_involution() {
        for (i, &j) in MIRROR_68.iter().enumerate() {
            assert_eq!(MIRROR_68[j], i);
        }
    }

    fn arb_face() -> impl Strategy<Value = LandmarkSet> {
        proptest::collection::vec((20.0f64..200.0, 20.0f64..200.0), 68).prop_filter_map(
            "eyes apart",
            |pts| {
                let lm = face(pts);
                (lm.get(36).unwrap().distance(lm.get(45).unwrap()) > 5.0).then_some(lm)
            },
        )
    }

    proptest! {
        #[test]
        fn mirrored_face_gives_mirrored_centers(lm in arb_face()) {
            let table = RuleTable::default_v1();
            let base = compute_au_centers(&lm, &table, IMG).unwrap();
            let flipped = lm.mirrored(IMG, &MIRROR_68);
            let swapped = table.partner_swapped(&MIRROR_68);
            let c = compute_au_centers(&flipped, &swapped, IMG).unwrap();
            let w = (IMG.width - 1) as f64;
            for (a, b) in base.centers().iter().zip(c.centers()) {
                prop_assert!((w - a.x - b.x).abs() < 1e-9);
                prop_assert!((a.y - b.y).abs() < 1e-9);
            }
        }

        #[test]
        fn centers_scale_with_the_face(lm in arb_face(), s in 0.5f64..2.0) {
            let table = RuleTable::default_v1();
            let big = ImageSize::square(4000);
            let a = compute_au_centers(&lm, &table, big).unwrap();
            let b = compute_au_centers(&lm.scaled(s), &table, big).unwrap();
            for (p, q) in a.centers().iter().zip(b.centers()) {
                prop_assert!((p.x * s - q.x).abs() < 1e-9 && (p.y * s - q.y).abs() < 1e-9);
            }
        }

        #[test]
        fn windows_are_full_size_and_inside(r in 0usize..30, c in 0usize..30, rows in 3usize..30, cols in 3usize..30, size in 1usize..4) {
            let grid = GridSize { rows, cols };
            let w = crop_window((r.min(rows - 1), c.min(cols - 1)), size, grid).unwrap();
            prop_assert_eq!(w.height(), size);
            prop_assert_eq!(w.width(), size);
            prop_assert!(w.rows.1 < rows && w.cols.1 < cols);
        }
    }
}
