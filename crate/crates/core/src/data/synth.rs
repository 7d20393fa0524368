//! Deterministic synthetic benchmark: schematic faces with one coloured
//! pattern per active AU, drawn in landmark-anchored oracle regions.

use std::fmt;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::face::{mirror_index, FaceStyle, LANDMARK_COUNT};
use crate::error::{Error, Result};
use crate::geometry::{CenterRule, CenterRuleTable, Corners, Point, Side};
use crate::kv::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Disc,
    Ring,
    Cross,
    Bar,
}

impl Pattern {
    pub fn name(self) -> &'static str {
        match self {
            Pattern::Disc => "disc",
            Pattern::Ring => "ring",
            Pattern::Cross => "cross",
            Pattern::Bar => "bar",
        }
    }

    /// Whether pixel `(x, y)` is covered by this pattern filling `b`.
    fn covers(self, b: &Corners, x: f64, y: f64) -> bool {
        if x < b.x1 || x > b.x2 || y < b.y1 || y > b.y2 {
            return false;
        }
        let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let (dx, dy) = ((x - cx) / rx.max(0.5), (y - cy) / ry.max(0.5));
        let r2 = dx * dx + dy * dy;
        match self {
            Pattern::Disc => r2 <= 1.0,
            Pattern::Ring => r2 <= 1.0 && r2 >= 0.4,
            Pattern::Cross => dx.abs() <= 0.3 || dy.abs() <= 0.3,
            Pattern::Bar => true,
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(Pattern::Disc),
            "ring" => Ok(Pattern::Ring),
            "cross" => Ok(Pattern::Cross),
            "bar" => Ok(Pattern::Bar),
            _ => Err(Error::Config(format!("unknown pattern {s:?}"))),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One AU of the synthetic catalog. Geometry is given for the image-left side
/// and mirrored about the face axis for the right side.
#[derive(Debug, Clone, PartialEq)]
pub struct AuSpec {
    pub name: String,
    pub pattern: Pattern,
    pub color: [f64; 3],
    pub anchor: usize,
    /// Pattern center relative to the anchor landmark, in pixels.
    pub offset: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    /// Per-frame uniform center jitter, pixels.
    pub jitter: f64,
    pub rate: f64,
    /// Zero-based parent AU for the label sampler.
    pub parent: Option<usize>,
    /// `p(this = 1 | parent = 1)`.
    pub cond: f64,
    /// Probability of a label-independent look-alike distractor.
    pub clutter: f64,
    pub clutter_offset: (f64, f64),
}

impl AuSpec {
    #[allow(clippy::too_many_arguments)]
    fn simple(
        name: &str,
        pattern: Pattern,
        color: [f64; 3],
        anchor: usize,
        offset: (f64, f64),
        width: (f64, f64),
        height: (f64, f64),
        rate: f64,
    ) -> Self {
        Self {
            name: name.into(),
            pattern,
            color,
            anchor,
            offset,
            width,
            height,
            jitter: 2.0,
            rate,
            parent: None,
            cond: 0.0,
            clutter: 0.0,
            clutter_offset: (0.0, 0.0),
        }
    }

    fn with_parent(mut self, parent: usize, cond: f64) -> Self {
        self.parent = Some(parent);
        self.cond = cond;
        self
    }

    fn with_clutter(mut self, p: f64, offset: (f64, f64)) -> Self {
        self.clutter = p;
        self.clutter_offset = offset;
        self
    }
}

/// The shipped twelve-entry catalog; the first `num_aus` entries are used.
pub fn default_catalog() -> Vec<AuSpec> {
    use Pattern::*;
    vec![
        AuSpec::simple("AU1", Disc, [0.95, 0.1, 0.1], 21, (-10.0, -18.0), (18.0, 24.0), (18.0, 24.0), 0.35)
            .with_clutter(0.3, (0.0, 26.0)),
        AuSpec::simple("AU2", Cross, [0.1, 0.85, 0.15], 17, (-4.0, -14.0), (20.0, 26.0), (20.0, 26.0), 0.35)
            .with_parent(0, 0.7)
            .with_clutter(0.3, (0.0, 26.0)),
        AuSpec::simple("AU3", Bar, [0.1, 0.2, 0.95], 31, (-34.0, -2.0), (8.0, 10.0), (22.0, 26.0), 0.3)
            .with_clutter(0.3, (0.0, 28.0)),
        AuSpec::simple("AU4", Ring, [0.9, 0.1, 0.9], 40, (-2.0, 15.0), (12.0, 16.0), (12.0, 16.0), 0.3)
            .with_parent(2, 0.6)
            .with_clutter(0.3, (0.0, 26.0)),
        AuSpec::simple("AU5", Bar, [0.95, 0.9, 0.1], 8, (0.0, -14.0), (84.0, 92.0), (12.0, 14.0), 0.25)
            .with_parent(3, 0.5),
        AuSpec::simple("AU6", Bar, [0.1, 0.9, 0.9], 29, (0.0, -3.0), (10.0, 12.0), (76.0, 80.0), 0.3)
            .with_parent(0, 0.55),
        AuSpec::simple("AU7", Disc, [0.95, 0.55, 0.1], 2, (14.0, 0.0), (10.0, 14.0), (10.0, 14.0), 0.3),
        AuSpec::simple("AU8", Ring, [0.5, 0.1, 0.9], 48, (-6.0, 18.0), (12.0, 14.0), (12.0, 14.0), 0.3),
        AuSpec::simple("AU9", Cross, [0.95, 0.5, 0.6], 27, (0.0, -44.0), (12.0, 16.0), (12.0, 16.0), 0.3),
        AuSpec::simple("AU10", Bar, [0.4, 0.6, 0.1], 5, (8.0, 0.0), (6.0, 8.0), (16.0, 20.0), 0.3),
        AuSpec::simple("AU11", Disc, [0.1, 0.5, 0.5], 36, (-4.0, -30.0), (8.0, 10.0), (8.0, 10.0), 0.3),
        AuSpec::simple("AU12", Ring, [0.6, 0.6, 0.95], 12, (-10.0, 8.0), (12.0, 14.0), (12.0, 14.0), 0.3),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub frames: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, intensities in `[0, 1]`.
    pub noise: f64,
    pub aus: Vec<AuSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 24,
            frames: 40,
            image_size: 200,
            seed: 0,
            noise: 0.03,
            aus: default_catalog().into_iter().take(6).collect(),
        }
    }
}

fn pair(kv: &KeyValues, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
    match kv.list_or::<f64>(key, vec![default.0, default.1])?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} needs two comma-separated numbers"))),
    }
}

impl SynthConfig {
    pub fn num_aus(&self) -> usize {
        self.aus.len()
    }

    /// Reads a flat `key=value` config. Per-AU keys are `au.N.field` with `N`
    /// starting at 1 and override the default catalog entry `N`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&["num_aus", "subjects", "frames", "image_size", "seed", "noise", "au.*"])?;
        let base = Self::default();
        let catalog = default_catalog();
        let num_aus: usize = kv.parse_or("num_aus", base.num_aus())?;
        if num_aus == 0 {
            return Err(Error::Config("num_aus must be positive".into()));
        }
        let mut aus = Vec::with_capacity(num_aus);
        for j in 0..num_aus {
            let mut au = catalog.get(j).cloned().unwrap_or_else(|| {
                let mut a = catalog[j % catalog.len()].clone();
                a.name = format!("AU{}", j + 1);
                a
            });
            let key = |f: &str| format!("au.{}.{f}", j + 1);
            if let Some(v) = kv.get(&key("name")) {
                au.name = v.to_string();
            }
            au.pattern = kv.parse_or(&key("pattern"), au.pattern)?;
            let c = kv.list_or::<f64>(&key("color"), au.color.to_vec())?;
            au.color = c
                .try_into()
                .map_err(|_| Error::Config(format!("{} needs three numbers", key("color"))))?;
            au.anchor = kv.parse_or(&key("anchor"), au.anchor)?;
            au.offset = pair(kv, &key("offset"), au.offset)?;
            au.width = pair(kv, &key("width"), au.width)?;
            au.height = pair(kv, &key("height"), au.height)?;
            au.jitter = kv.parse_or(&key("jitter"), au.jitter)?;
            au.rate = kv.parse_or(&key("rate"), au.rate)?;
            au.parent = match kv.get(&key("parent")) {
                None => au.parent,
                Some("none") | Some("0") => None,
                Some(v) => Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("cannot parse {}={v:?}", key("parent"))))?
                        - 1,
                ),
            };
            au.cond = kv.parse_or(&key("cond"), au.cond)?;
            au.clutter = kv.parse_or(&key("clutter"), au.clutter)?;
            au.clutter_offset = pair(kv, &key("clutter_offset"), au.clutter_offset)?;
            aus.push(au);
        }
        for k in kv.keys().filter(|k| k.starts_with("au.")) {
            let idx = k[3..].split('.').next().and_then(|n| n.parse::<usize>().ok());
            if !matches!(idx, Some(n) if (1..=num_aus).contains(&n)) {
                return Err(Error::Config(format!("key {k:?} does not name an AU in 1..={num_aus}")));
            }
        }
        let cfg = Self {
            subjects: kv.parse_or("subjects", base.subjects)?,
            frames: kv.parse_or("frames", base.frames)?,
            image_size: kv.parse_or("image_size", base.image_size)?,
            seed: kv.parse_or("seed", base.seed)?,
            noise: kv.parse_or("noise", base.noise)?,
            aus,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::from_file(path)?)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("num_aus", self.num_aus());
        kv.set("subjects", self.subjects);
        kv.set("frames", self.frames);
        kv.set("image_size", self.image_size);
        kv.set("seed", self.seed);
        kv.set("noise", self.noise);
        for (j, au) in self.aus.iter().enumerate() {
            let key = |f: &str| format!("au.{}.{f}", j + 1);
            kv.set(&key("name"), &au.name);
            kv.set(&key("pattern"), au.pattern);
            kv.set(&key("color"), format!("{},{},{}", au.color[0], au.color[1], au.color[2]));
            kv.set(&key("anchor"), au.anchor);
            kv.set(&key("offset"), format!("{},{}", au.offset.0, au.offset.1));
            kv.set(&key("width"), format!("{},{}", au.width.0, au.width.1));
            kv.set(&key("height"), format!("{},{}", au.height.0, au.height.1));
            kv.set(&key("jitter"), au.jitter);
            kv.set(&key("rate"), au.rate);
            kv.set(&key("parent"), au.parent.map_or("none".to_string(), |p| (p + 1).to_string()));
            kv.set(&key("cond"), au.cond);
            kv.set(&key("clutter"), au.clutter);
            kv.set(
                &key("clutter_offset"),
                format!("{},{}", au.clutter_offset.0, au.clutter_offset.1),
            );
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.frames == 0 {
            return Err(Error::Config("subjects and frames must be positive".into()));
        }
        if self.image_size < 64 {
            return Err(Error::Config(format!("image_size {} is below 64", self.image_size)));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        for (j, au) in self.aus.iter().enumerate() {
            let name = &au.name;
            if au.anchor >= LANDMARK_COUNT {
                return Err(Error::Config(format!("{name}: anchor {} out of range", au.anchor)));
            }
            for (lo, hi) in [au.width, au.height] {
                if !(lo > 0.0 && lo <= hi) {
                    return Err(Error::Config(format!("{name}: size range {lo}..{hi} is invalid")));
                }
            }
            if !(0.0..=1.0).contains(&au.clutter) {
                return Err(Error::Config(format!("{name}: clutter probability {}", au.clutter)));
            }
            if au.parent == Some(j) || au.parent.is_some_and(|p| p >= self.num_aus()) {
                return Err(Error::Config(format!("{name}: parent index is invalid")));
            }
        }
        Ok(())
    }

    /// Rules whose centers coincide with each AU's nominal pattern center.
    pub fn rules(&self) -> CenterRuleTable {
        let scale = self.image_size as f64 / 200.0;
        CenterRuleTable {
            left: self
                .aus
                .iter()
                .map(|a| CenterRule {
                    anchor: a.anchor,
                    dx: a.offset.0 * scale,
                    dy: a.offset.1 * scale,
                })
                .collect(),
            right: self
                .aus
                .iter()
                .map(|a| CenterRule {
                    anchor: mirror_index(a.anchor),
                    dx: -a.offset.0 * scale,
                    dy: a.offset.1 * scale,
                })
                .collect(),
        }
    }

    /// Parent-first order for the label sampler, or a generation error on a cycle.
    fn label_order(&self) -> Result<Vec<usize>> {
        let c = self.num_aus();
        let mut order = Vec::with_capacity(c);
        let mut state = vec![0u8; c];
        for start in 0..c {
            let mut chain = Vec::new();
            let mut j = start;
            loop {
                match state[j] {
                    2 => break,
                    1 => {
                        return Err(Error::Generation(format!(
                            "parent links form a cycle through {}",
                            self.aus[j].name
                        )))
                    }
                    _ => {}
                }
                state[j] = 1;
                chain.push(j);
                match self.aus[j].parent {
                    Some(p) => j = p,
                    None => break,
                }
            }
            for &k in chain.iter().rev() {
                state[k] = 2;
                order.push(k);
            }
        }
        Ok(order)
    }

    /// Per-AU `(q0, q1)`: probability of a positive given the parent is off / on.
    /// Roots use `q0 = q1 = rate`.
    pub fn label_probabilities(&self) -> Result<Vec<(f64, f64)>> {
        self.label_order()?;
        self.aus
            .iter()
            .map(|au| {
                if !(0.0..=1.0).contains(&au.rate) {
                    return Err(Error::Generation(format!(
                        "{}: rate {} is not a probability",
                        au.name, au.rate
                    )));
                }
                let Some(p) = au.parent else {
                    return Ok((au.rate, au.rate));
                };
                let rp = self.aus[p].rate;
                if !(0.0..=1.0).contains(&au.cond) {
                    return Err(Error::Generation(format!(
                        "{}: conditional {} is not a probability",
                        au.name, au.cond
                    )));
                }
                if rp >= 1.0 {
                    return if (au.cond - au.rate).abs() < 1e-12 {
                        Ok((au.rate, au.cond))
                    } else {
                        Err(Error::Generation(format!(
                            "{}: parent {} is always on, so rate must equal the conditional",
                            au.name, self.aus[p].name
                        )))
                    };
                }
                let q0 = (au.rate - au.cond * rp) / (1.0 - rp);
                if !(-1e-12..=1.0 + 1e-12).contains(&q0) {
                    return Err(Error::Generation(format!(
                        "{}: rate {} with p({} | {})={} needs p({} | not {})={q0:.3}, outside [0, 1]",
                        au.name, au.rate, au.name, self.aus[p].name, au.cond, au.name, self.aus[p].name
                    )));
                }
                Ok((q0.clamp(0.0, 1.0), au.cond))
            })
            .collect()
    }

    fn stream(&self, subject: usize, frame: usize, tag: &str) -> ChaCha8Rng {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write_u64(subject as u64);
        h.write_u64(frame as u64);
        h.write(tag.as_bytes());
        ChaCha8Rng::seed_from_u64(h.finish())
    }

    fn draw_labels(&self, subject: usize, frame: usize, probs: &[(f64, f64)], order: &[usize]) -> Vec<u8> {
        let mut rng = self.stream(subject, frame, "labels");
        let mut y = vec![0u8; self.num_aus()];
        for &j in order {
            let (q0, q1) = probs[j];
            let p = match self.aus[j].parent {
                Some(par) if y[par] == 1 => q1,
                _ => q0,
            };
            y[j] = u8::from(rng.random::<f64>() < p);
        }
        y
    }

    /// The label matrix of a `subjects × frames` set, row-major by subject then frame.
    /// Identical to the labels written by [`generate_synthetic`].
    pub fn label_table(&self) -> Result<Vec<Vec<u8>>> {
        let probs = self.label_probabilities()?;
        let order = self.label_order()?;
        let mut rows = Vec::with_capacity(self.subjects * self.frames);
        for s in 0..self.subjects {
            for f in 0..self.frames {
                rows.push(self.draw_labels(s, f, &probs, &order));
            }
        }
        Ok(rows)
    }

    pub fn subject_id(&self, subject: usize) -> String {
        let width = self.subjects.to_string().len().max(2);
        format!("S{:0width$}", subject + 1)
    }
}

/// One rendered frame with its annotations.
#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub size: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    pub landmarks: Vec<Point>,
    pub labels: Vec<u8>,
    /// Oracle box per AU and side (left, right), in pixel coordinates.
    pub oracle: Vec<[Corners; 2]>,
    /// Per AU, the pixels painted by that AU's own pattern (not its clutter).
    pub masks: Vec<Vec<bool>>,
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.size + x];
        for (c, &t) in p.iter_mut().zip(&color) {
            *c = *c * (1.0 - alpha) + t * alpha;
        }
    }

    fn span(&self, lo: f64, hi: f64) -> std::ops::RangeInclusive<usize> {
        let last = self.size as f64 - 1.0;
        let a = lo.floor().clamp(0.0, last) as usize;
        let b = hi.ceil().clamp(0.0, last) as usize;
        a..=b
    }

    fn stroke(&mut self, a: Point, b: Point, radius: f64, color: [f64; 3]) {
        let (vx, vy) = (b.x - a.x, b.y - a.y);
        let len2 = (vx * vx + vy * vy).max(1e-12);
        for y in self.span(a.y.min(b.y) - radius, a.y.max(b.y) + radius) {
            for x in self.span(a.x.min(b.x) - radius, a.x.max(b.x) + radius) {
                let (px, py) = (x as f64, y as f64);
                let t = (((px - a.x) * vx + (py - a.y) * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (px - a.x - t * vx, py - a.y - t * vy);
                if dx * dx + dy * dy <= radius * radius {
                    self.blend(x, y, color, 1.0);
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[Point], closed: bool, radius: f64, color: [f64; 3]) {
        for w in pts.windows(2) {
            self.stroke(w[0], w[1], radius, color);
        }
        if closed && pts.len() > 2 {
            self.stroke(pts[pts.len() - 1], pts[0], radius, color);
        }
    }

    /// Paints `pattern` inside `b`; returns the painted pixel indices.
    fn pattern(&mut self, pattern: Pattern, b: &Corners, color: [f64; 3], alpha: f64) -> Vec<usize> {
        let mut painted = Vec::new();
        for y in self.span(b.y1, b.y2) {
            for x in self.span(b.x1, b.x2) {
                if pattern.covers(b, x as f64, y as f64) {
                    self.blend(x, y, color, alpha);
                    painted.push(y * self.size + x);
                }
            }
        }
        painted
    }
}

fn centered(c: Point, w: f64, h: f64) -> Corners {
    Corners::new(c.x - w / 2.0, c.y - h / 2.0, c.x + w / 2.0, c.y + h / 2.0)
}

fn subject_style(cfg: &SynthConfig, subject: usize) -> FaceStyle {
    FaceStyle::sample(&mut cfg.stream(subject, usize::MAX, "style"), cfg.image_size as f64)
}

/// Renders frame `frame` of subject `subject`.
pub fn render_frame(cfg: &SynthConfig, subject: usize, frame: usize) -> Result<SynthFrame> {
    cfg.validate()?;
    let probs = cfg.label_probabilities()?;
    let order = cfg.label_order()?;
    let labels = cfg.draw_labels(subject, frame, &probs, &order);
    Ok(render_with_labels(cfg, subject, frame, labels, &subject_style(cfg, subject)))
}

fn render_with_labels(
    cfg: &SynthConfig,
    subject: usize,
    frame: usize,
    labels: Vec<u8>,
    style: &FaceStyle,
) -> SynthFrame {
    let n = cfg.image_size;
    let s = n as f64 / 200.0;
    let mut rng = cfg.stream(subject, frame, "render");
    let face = style.moved(
        rng.random_range(-2.0..2.0) * s,
        rng.random_range(-2.0..2.0) * s,
        rng.random_range(0.98..1.02),
    );
    let landmarks = face.landmarks();

    let mut canvas = Canvas {
        size: n,
        px: vec![[style.background; 3]; n * n],
    };
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 - face.center.x) / face.radius_x;
            let v = (y as f64 - face.center.y) / face.radius_y;
            if u * u + v * v <= 1.0 {
                canvas.blend(x, y, style.skin, 1.0);
            }
        }
    }
    let tone = style.skin.map(|c| c * style.feature_tone);
    let r = 1.2 * s;
    for range in [17..22, 22..27, 27..31, 31..36] {
        canvas.polyline(&landmarks[range], false, r, tone);
    }
    for range in [36..42, 42..48, 48..60] {
        canvas.polyline(&landmarks[range], true, r, tone);
    }

    let axis = face.center.x;
    let mirror = |b: Corners| Corners::new(2.0 * axis - b.x2, b.y1, 2.0 * axis - b.x1, b.y2);
    let mut placed = Vec::with_capacity(cfg.num_aus());
    for au in &cfg.aus {
        let a = landmarks[au.anchor];
        let j = au.jitter * s;
        let center = Point::new(
            a.x + au.offset.0 * s + rng.random_range(-j..=j),
            a.y + au.offset.1 * s + rng.random_range(-j..=j),
        );
        let w = rng.random_range(au.width.0..=au.width.1) * s;
        let h = rng.random_range(au.height.0..=au.height.1) * s;
        let alpha = rng.random_range(0.6..0.9);
        let clutter = rng.random::<f64>() < au.clutter;
        placed.push((centered(center, w, h), alpha, clutter));
    }

    for (au, &(left, alpha, clutter)) in cfg.aus.iter().zip(&placed) {
        if clutter {
            let (dx, dy) = (au.clutter_offset.0 * s, au.clutter_offset.1 * s);
            let b = Corners::new(left.x1 + dx, left.y1 + dy, left.x2 + dx, left.y2 + dy);
            canvas.pattern(au.pattern, &b, au.color, alpha);
            canvas.pattern(au.pattern, &mirror(b), au.color, alpha);
        }
    }
    let mut masks = vec![vec![false; n * n]; cfg.num_aus()];
    let mut oracle = Vec::with_capacity(cfg.num_aus());
    for (j, (au, &(left, alpha, _))) in cfg.aus.iter().zip(&placed).enumerate() {
        let right = mirror(left);
        if labels[j] == 1 {
            for b in [left, right] {
                for i in canvas.pattern(au.pattern, &b, au.color, alpha) {
                    masks[j][i] = true;
                }
            }
        }
        oracle.push([left, right]);
    }

    let normal = Normal::new(0.0, cfg.noise.max(1e-12)).expect("noise validated");
    let mut rgb = Vec::with_capacity(n * n * 3);
    for p in &canvas.px {
        for &c in p {
            let v = if cfg.noise > 0.0 { c + normal.sample(&mut rng) } else { c };
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    SynthFrame {
        size: n,
        rgb,
        landmarks,
        labels,
        oracle,
        masks,
    }
}

/// What [`generate_synthetic`] wrote.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SynthSummary {
    pub samples: usize,
    pub num_aus: usize,
    pub positives: Vec<usize>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Load(format!("{}: {other:?}", path.display())),
    }
}

/// Writes a dataset directory:
/// `images/<subject>/<frame>.png`, `labels.csv`, `landmarks.csv`, `oracle.csv`,
/// `rules.txt` and the echoed `synth.cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let labels = cfg.label_table()?;
    let c = cfg.num_aus();
    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;

    let open = |name: &str| -> Result<(csv::Writer<std::fs::File>, std::path::PathBuf)> {
        let path = out_dir.join(name);
        let w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        Ok((w, path))
    };
    let (mut lab_w, lab_p) = open("labels.csv")?;
    let (mut lm_w, lm_p) = open("landmarks.csv")?;
    let (mut or_w, or_p) = open("oracle.csv")?;

    let mut header = vec!["subject".to_string(), "frame".to_string()];
    header.extend(cfg.aus.iter().map(|a| a.name.clone()));
    lab_w.write_record(&header).map_err(|e| csv_error(&lab_p, e))?;
    let mut header = vec!["subject".to_string(), "frame".to_string()];
    for i in 1..=LANDMARK_COUNT {
        header.push(format!("x{i}"));
        header.push(format!("y{i}"));
    }
    lm_w.write_record(&header).map_err(|e| csv_error(&lm_p, e))?;
    let mut header = vec!["subject".to_string(), "frame".to_string()];
    for side in Side::BOTH {
        let tag = if side == Side::Left { "L" } else { "R" };
        for au in &cfg.aus {
            for k in ["x1", "y1", "x2", "y2"] {
                header.push(format!("{tag}_{}_{k}", au.name));
            }
        }
    }
    or_w.write_record(&header).map_err(|e| csv_error(&or_p, e))?;

    let mut positives = vec![0usize; c];
    let mut row = 0;
    for s in 0..cfg.subjects {
        let sid = cfg.subject_id(s);
        let dir = out_dir.join("images").join(&sid);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let style = subject_style(cfg, s);
        for f in 0..cfg.frames {
            let y = labels[row].clone();
            row += 1;
            for (p, &v) in positives.iter_mut().zip(&y) {
                *p += v as usize;
            }
            let frame = render_with_labels(cfg, s, f, y, &style);
            let path = dir.join(format!("{f:04}.png"));
            image::save_buffer(
                &path,
                &frame.rgb,
                cfg.image_size as u32,
                cfg.image_size as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Image { path: path.clone(), source: e })?;

            let fid = format!("{f:04}");
            let mut rec = vec![sid.clone(), fid.clone()];
            rec.extend(frame.labels.iter().map(|v| v.to_string()));
            lab_w.write_record(&rec).map_err(|e| csv_error(&lab_p, e))?;
            let mut rec = vec![sid.clone(), fid.clone()];
            for p in &frame.landmarks {
                rec.push(format!("{:.3}", p.x));
                rec.push(format!("{:.3}", p.y));
            }
            lm_w.write_record(&rec).map_err(|e| csv_error(&lm_p, e))?;
            let mut rec = vec![sid.clone(), fid];
            for side in 0..2 {
                for boxes in &frame.oracle {
                    rec.extend(boxes[side].to_array().iter().map(|v| format!("{v:.3}")));
                }
            }
            or_w.write_record(&rec).map_err(|e| csv_error(&or_p, e))?;
        }
    }
    for (w, p) in [(&mut lab_w, &lab_p), (&mut lm_w, &lm_p), (&mut or_w, &or_p)] {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let rules = out_dir.join("rules.txt");
    std::fs::write(&rules, cfg.rules().to_text()).map_err(|e| Error::io(&rules, e))?;
    let echo = out_dir.join("synth.cfg");
    std::fs::write(&echo, cfg.to_kv().to_text()).map_err(|e| Error::io(&echo, e))?;
    Ok(SynthSummary {
        samples: cfg.subjects * cfg.frames,
        num_aus: c,
        positives,
    })
}
