use crate::error::{invalid, Result};
use crate::seed;
use rand::Rng;

/// Grayscale patch sampled bilinearly with border clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Texture {
    pub fn constant(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let px = |x: usize, y: usize| self.data[y * self.width + x] as f64;
        (1.0 - ay) * ((1.0 - ax) * px(x0, y0) + ax * px(x1, y0)) + ay * ((1.0 - ax) * px(x0, y1) + ax * px(x1, y1))
    }

    /// Two-octave value noise stretched to `[lo, hi]`, passed through a double
    /// smoothstep so regions are flat-ish with sharp transitions between them.
    pub fn noise(width: usize, height: usize, cell: f64, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let mut acc = vec![0.0f64; width * height];
        for (octave, amp) in [(cell, 1.0), (cell / 3.0, 0.45)] {
            let gw = (width as f64 / octave).ceil() as usize + 2;
            let gh = (height as f64 / octave).ceil() as usize + 2;
            let grid = Texture {
                width: gw,
                height: gh,
                data: (0..gw * gh).map(|_| rng.random::<f32>()).collect(),
            };
            for y in 0..height {
                for x in 0..width {
                    acc[y * width + x] += amp * grid.sample(x as f64 / octave, y as f64 / octave);
                }
            }
        }
        let (mn, mx) = acc.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (mx - mn).max(1e-12);
        let data = acc
            .iter()
            .map(|&v| {
                let smooth = |u: f64| u * u * (3.0 - 2.0 * u);
                lo + (hi - lo) * smooth(smooth((v - mn) / span)) as f32
            })
            .collect();
        Self { width, height, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disc { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
    Ellipse { rx: f64, ry: f64 },
}

impl Shape {
    /// Whether the offset `(dx, dy)` from the sprite centre is covered.
    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Shape::Ellipse { rx, ry } => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
        }
    }

    pub fn half_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disc { radius } => (radius, radius),
            Shape::Rect { half_w, half_h } => (half_w, half_h),
            Shape::Ellipse { rx, ry } => (rx, ry),
        }
    }
}

/// Textured shape translating at constant velocity. Higher `z_order` is on top.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    pub texture: Texture,
    pub position: (f64, f64),
    pub velocity: (f64, f64),
    pub z_order: i32,
}

impl Sprite {
    pub fn centre(&self, t: f64) -> (f64, f64) {
        (self.position.0 + self.velocity.0 * t, self.position.1 + self.velocity.1 * t)
    }

    /// Texture value at offset `(dx, dy)` from the centre; the texture is
    /// centred on the sprite.
    pub fn shade(&self, dx: f64, dy: f64) -> f64 {
        let cx = (self.texture.width - 1) as f64 / 2.0;
        let cy = (self.texture.height - 1) as f64 / 2.0;
        self.texture.sample(cx + dx, cy + dy)
    }
}

/// Everything needed to render and simulate one sequence. The background is
/// a texture larger than the canvas that pans at `pan` pixels per second;
/// canvas pixel `(x, y)` at time `t` shows background point
/// `(x + bg_origin.0 - pan.0 t, y + bg_origin.1 - pan.1 t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub duration: f64,
    pub frame_rate: f64,
    pub background: Texture,
    pub bg_origin: (f64, f64),
    pub pan: (f64, f64),
    pub sprites: Vec<Sprite>,
    pub epsilon: f64,
    pub offset: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Static scene on a constant background.
    pub fn plain(width: usize, height: usize, duration: f64, frame_rate: f64, level: f32) -> Self {
        Self {
            width,
            height,
            duration,
            frame_rate,
            background: Texture::constant(width, height, level),
            bg_origin: (0.0, 0.0),
            pan: (0.0, 0.0),
            sprites: Vec::new(),
            epsilon: 0.2,
            offset: 1e-3,
            seed: 0,
        }
    }

    /// `floor(duration * rate) + 1`-style count with a tolerance for exact
    /// products: 0.5 s at 50 Hz gives 25 frames at `k / rate`, k = 0..24.
    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate - 1e-9).ceil().max(0.0) as usize;
        (0..n).map(|k| k as f64 / self.frame_rate).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("empty canvas"));
        }
        if !(self.epsilon > 0.0) || !(self.offset > 0.0) {
            return Err(invalid("contrast threshold and offset must be positive"));
        }
        if !(self.frame_rate > 0.0) || self.frame_times().len() < 2 {
            return Err(invalid("duration and frame rate must yield at least two frames"));
        }
        let in_range = |t: &Texture| t.data.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.background) || !self.sprites.iter().all(|s| in_range(&s.texture)) {
            return Err(invalid("texture intensities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Knobs of the random scene distribution. Lengths are in pixels at the
/// configured resolution, speeds in pixels per second.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub duration: f64,
    pub frame_rate: f64,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub epsilon_range: (f64, f64),
    pub offset: f64,
    pub sprite_speed: (f64, f64),
    pub pan_speed: (f64, f64),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            duration: 2.0,
            frame_rate: 50.0,
            min_sprites: 2,
            max_sprites: 4,
            epsilon_range: (0.1, 1.5),
            offset: 1e-3,
            sprite_speed: (30.0, 90.0),
            pan_speed: (10.0, 40.0),
        }
    }
}

fn random_velocity(rng: &mut impl Rng, range: (f64, f64)) -> (f64, f64) {
    let speed = if range.1 > range.0 { rng.random_range(range.0..=range.1) } else { range.0 };
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    (speed * angle.cos(), speed * angle.sin())
}

pub fn random_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSpec> {
    if cfg.min_sprites > cfg.max_sprites {
        return Err(invalid("min_sprites exceeds max_sprites"));
    }
    let (e_lo, e_hi) = cfg.epsilon_range;
    if !(e_lo > 0.0 && e_hi >= e_lo) {
        return Err(invalid(format!("bad contrast threshold range [{e_lo}, {e_hi}]")));
    }
    let mut rng = seed::rng(seed, "scene");
    let scale = cfg.width.min(cfg.height) as f64 / 64.0;
    let pan = random_velocity(&mut rng, (cfg.pan_speed.0 * scale, cfg.pan_speed.1 * scale));
    let margin = (pan.0.abs().max(pan.1.abs()) * cfg.duration).ceil() + 2.0;
    let pad = 2 * margin as usize;
    let background = Texture::noise(
        cfg.width + pad,
        cfg.height + pad,
        6.0 * scale,
        rng.random_range(0.02..0.15),
        rng.random_range(0.8..0.98),
        &mut rng,
    );
    let count = rng.random_range(cfg.min_sprites..=cfg.max_sprites);
    let mut sprites = Vec::with_capacity(count);
    for z in 0..count {
        let size = |rng: &mut rand_chacha::ChaCha8Rng| rng.random_range(5.0..14.0) * scale;
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc { radius: size(&mut rng) },
            1 => Shape::Rect {
                half_w: size(&mut rng),
                half_h: size(&mut rng),
            },
            _ => Shape::Ellipse {
                rx: size(&mut rng),
                ry: size(&mut rng),
            },
        };
        let (hx, hy) = shape.half_extent();
        let base: f32 = rng.random_range(0.1..0.9);
        let spread: f32 = rng.random_range(0.3..0.6);
        let lo = (base - spread / 2.0).clamp(0.02, 0.98);
        let hi = (base + spread / 2.0).clamp(lo, 0.98);
        let texture = Texture::noise(
            (2.0 * hx).ceil() as usize + 3,
            (2.0 * hy).ceil() as usize + 3,
            rng.random_range(3.0..7.0) * scale,
            lo,
            hi,
            &mut rng,
        );
        sprites.push(Sprite {
            shape,
            texture,
            position: (rng.random_range(0.0..cfg.width as f64), rng.random_range(0.0..cfg.height as f64)),
            velocity: random_velocity(&mut rng, (cfg.sprite_speed.0 * scale, cfg.sprite_speed.1 * scale)),
            z_order: z as i32,
        });
    }
    let spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        duration: cfg.duration,
        frame_rate: cfg.frame_rate,
        background,
        bg_origin: (margin, margin),
        pan,
        sprites,
        epsilon: if e_hi > e_lo { rng.random_range(e_lo..=e_hi) } else { e_lo },
        offset: cfg.offset,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}
