//! Deterministic bouncing-balls world with history-dependent color changes.
//!
//! The arena is the unit square with `y` pointing down (row order of the
//! rendered image). Balls move with `dt = 1` frame, collide elastically with
//! equal masses and reflect off the four walls. A wall hit recolors the ball
//! using the color a previous collision partner had at the time of that
//! collision: `(own + partner) mod 5`, where the variant picks which previous
//! collision counts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::parallel::parallel_map;

pub const NUM_COLORS: u8 = 5;

/// Rejection samples allowed per ball before placement is declared infeasible.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

const EPISODE_MAGIC: &[u8; 7] = b"OCVTEP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mod1,
    Mod2,
    Mod3,
    Mod1234,
}

impl Variant {
    pub fn id(self) -> u32 {
        match self {
            Variant::Mod1 => 1,
            Variant::Mod2 => 2,
            Variant::Mod3 => 3,
            Variant::Mod1234 => 1234,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Variant::Mod1),
            2 => Some(Variant::Mod2),
            3 => Some(Variant::Mod3),
            1234 => Some(Variant::Mod1234),
            _ => None,
        }
    }

    /// Which previous collision (1 = most recent) a hit on `wall` reads.
    pub fn lag(self, wall: Wall) -> usize {
        match self {
            Variant::Mod1 => 1,
            Variant::Mod2 => 2,
            Variant::Mod3 => 3,
            Variant::Mod1234 => match wall {
                Wall::Left => 1,
                Wall::Top => 2,
                Wall::Right => 3,
                Wall::Bottom => 4,
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Variant::Mod1 => "mod1",
            Variant::Mod2 => "mod2",
            Variant::Mod3 => "mod3",
            Variant::Mod1234 => "mod1234",
        };
        f.write_str(name)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mod1" => Ok(Variant::Mod1),
            "mod2" => Ok(Variant::Mod2),
            "mod3" => Ok(Variant::Mod3),
            "mod1234" => Ok(Variant::Mod1234),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wall {
    Left,
    Top,
    Right,
    Bottom,
}

impl Wall {
    pub const ALL: [Wall; 4] = [Wall::Left, Wall::Top, Wall::Right, Wall::Bottom];

    pub fn id(self) -> i32 {
        self as i32
    }

    pub fn from_id(id: i32) -> Option<Self> {
        Wall::ALL.get(usize::try_from(id).ok()?).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    pub color: u8,
}

impl BallState {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * (self.velocity[0] * self.velocity[0] + self.velocity[1] * self.velocity[1])
    }

    pub fn in_bounds(&self) -> bool {
        self.position
            .iter()
            .all(|&p| p - self.radius >= 0.0 && p + self.radius <= 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Ball { partner: usize, partner_color: u8 },
    Wall(Wall),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub frame: usize,
    pub subject: usize,
    pub kind: EventKind,
}

impl InteractionEvent {
    pub fn is_ball(&self) -> bool {
        matches!(self.kind, EventKind::Ball { .. })
    }
}

/// New color after a wall hit.
///
/// `history` holds the subject's own events in frame order; wall events in it
/// are ignored. With fewer than `k` previous collisions the color is kept.
pub fn color_on_wall_hit(
    history: &[InteractionEvent],
    color: u8,
    variant: Variant,
    wall: Wall,
) -> u8 {
    let k = variant.lag(wall);
    let partner_color = history
        .iter()
        .rev()
        .filter_map(|e| match e.kind {
            EventKind::Ball { partner_color, .. } => Some(partner_color),
            EventKind::Wall(_) => None,
        })
        .nth(k - 1);
    match partner_color {
        Some(c) => (color + c) % NUM_COLORS,
        None => color,
    }
}

/// Live simulation state: balls plus each ball's interaction history.
#[derive(Clone, Debug)]
pub struct World {
    pub balls: Vec<BallState>,
    pub history: Vec<Vec<InteractionEvent>>,
    pub variant: Variant,
    pub frame: usize,
}

impl World {
    pub fn new(balls: Vec<BallState>, variant: Variant) -> Self {
        let history = vec![Vec::new(); balls.len()];
        World {
            balls,
            history,
            variant,
            frame: 0,
        }
    }

    /// Advance one frame and return the events that happened in it.
    ///
    /// Order within a frame: move, ball-ball contacts in ascending `(i, j)`,
    /// then walls per ball in `Wall::ALL` order.
    pub fn step(&mut self) -> Vec<InteractionEvent> {
        self.frame += 1;
        let frame = self.frame;
        let mut events = Vec::new();

        for b in &mut self.balls {
            b.position[0] += b.velocity[0];
            b.position[1] += b.velocity[1];
        }

        let n = self.balls.len();
        for i in 0..n {
            for j in i + 1..n {
                if let Some((ei, ej)) = self.resolve_contact(i, j, frame) {
                    self.history[i].push(ei);
                    self.history[j].push(ej);
                    events.push(ei);
                    events.push(ej);
                }
            }
        }

        for i in 0..n {
            for wall in Wall::ALL {
                if self.reflect(i, wall) {
                    let b = &mut self.balls[i];
                    b.color = color_on_wall_hit(&self.history[i], b.color, self.variant, wall);
                    let e = InteractionEvent {
                        frame,
                        subject: i,
                        kind: EventKind::Wall(wall),
                    };
                    self.history[i].push(e);
                    events.push(e);
                }
            }
        }
        events
    }

    fn resolve_contact(
        &mut self,
        i: usize,
        j: usize,
        frame: usize,
    ) -> Option<(InteractionEvent, InteractionEvent)> {
        let (a, b) = (self.balls[i], self.balls[j]);
        let dx = b.position[0] - a.position[0];
        let dy = b.position[1] - a.position[1];
        let dist = dx.hypot(dy);
        let min_dist = a.radius + b.radius;
        if dist >= min_dist {
            return None;
        }
        // coincident centers: separate along +x
        let normal = if dist > 0.0 {
            [dx / dist, dy / dist]
        } else {
            [1.0, 0.0]
        };

        let half = 0.5 * (min_dist - dist);
        let (ba, bb) = {
            let (lo, hi) = self.balls.split_at_mut(j);
            (&mut lo[i], &mut hi[0])
        };
        ba.position[0] -= normal[0] * half;
        ba.position[1] -= normal[1] * half;
        bb.position[0] += normal[0] * half;
        bb.position[1] += normal[1] * half;

        let closing = (a.velocity[0] - b.velocity[0]) * normal[0]
            + (a.velocity[1] - b.velocity[1]) * normal[1];
        if closing <= 0.0 {
            return None;
        }
        ba.velocity[0] -= closing * normal[0];
        ba.velocity[1] -= closing * normal[1];
        bb.velocity[0] += closing * normal[0];
        bb.velocity[1] += closing * normal[1];

        Some((
            InteractionEvent {
                frame,
                subject: i,
                kind: EventKind::Ball {
                    partner: j,
                    partner_color: b.color,
                },
            },
            InteractionEvent {
                frame,
                subject: j,
                kind: EventKind::Ball {
                    partner: i,
                    partner_color: a.color,
                },
            },
        ))
    }

    /// Mirror the ball back inside if it touches `wall`; returns whether it did.
    fn reflect(&mut self, i: usize, wall: Wall) -> bool {
        let b = &mut self.balls[i];
        let r = b.radius;
        let (axis, low) = match wall {
            Wall::Left => (0, true),
            Wall::Top => (1, true),
            Wall::Right => (0, false),
            Wall::Bottom => (1, false),
        };
        let p = b.position[axis];
        if low && p - r <= 0.0 {
            b.position[axis] = 2.0 * r - p;
            b.velocity[axis] = b.velocity[axis].abs();
            true
        } else if !low && p + r >= 1.0 {
            b.position[axis] = 2.0 * (1.0 - r) - p;
            b.velocity[axis] = -b.velocity[axis].abs();
            true
        } else {
            false
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub num_balls: usize,
    pub num_frames: usize,
    pub variant: Variant,
    pub radius: f64,
    pub speed: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            num_balls: 4,
            num_frames: 100,
            variant: Variant::Mod1,
            radius: 0.08,
            speed: 0.025,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_balls < 1 {
            return Err(Error::Config("sim.num_balls must be at least 1".into()));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("sim.num_frames must be at least 2".into()));
        }
        if !(self.radius > 0.0 && self.radius < 0.5) {
            return Err(Error::Config(format!(
                "sim.radius {} outside (0, 0.5)",
                self.radius
            )));
        }
        if !(self.speed.is_finite() && self.speed >= 0.0 && self.speed < self.radius) {
            return Err(Error::Config(format!(
                "sim.speed {} must lie in [0, radius)",
                self.speed
            )));
        }
        let side = 2.0 * self.radius;
        let per_row = (1.0 / side).floor() as usize;
        if per_row * per_row < self.num_balls {
            return Err(Error::Config(format!(
                "{} balls of radius {} do not fit in the arena",
                self.num_balls, self.radius
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub config: EpisodeConfig,
    /// `states[t][o]`
    pub states: Vec<Vec<BallState>>,
    pub events: Vec<InteractionEvent>,
}

impl Episode {
    pub fn num_frames(&self) -> usize {
        self.states.len()
    }

    pub fn num_balls(&self) -> usize {
        self.config.num_balls
    }

    /// Frames at which ball `o` changes color, as `(frame, ball)` pairs.
    pub fn color_changes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in 1..self.states.len() {
            for o in 0..self.config.num_balls {
                if self.states[t][o].color != self.states[t - 1][o].color {
                    out.push((t, o));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + c.num_frames * c.num_balls * 44);
        out.extend_from_slice(EPISODE_MAGIC);
        out.extend_from_slice(&(c.num_balls as u32).to_le_bytes());
        out.extend_from_slice(&(c.num_frames as u32).to_le_bytes());
        out.extend_from_slice(&c.variant.id().to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        out.extend_from_slice(&c.radius.to_le_bytes());
        out.extend_from_slice(&c.speed.to_le_bytes());
        for frame in &self.states {
            for b in frame {
                for v in [
                    b.position[0],
                    b.position[1],
                    b.velocity[0],
                    b.velocity[1],
                    b.radius,
                ] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&u32::from(b.color).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            let (kind, partner, wall, partner_color) = match e.kind {
                EventKind::Ball {
                    partner,
                    partner_color,
                } => (0i32, partner as i32, -1i32, i32::from(partner_color)),
                EventKind::Wall(w) => (1, -1, w.id(), -1),
            };
            for v in [
                e.frame as i32,
                e.subject as i32,
                kind,
                partner,
                wall,
                partner_color,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "episode file");
        if r.take(7)? != EPISODE_MAGIC {
            return Err(Error::malformed("episode file", "bad magic"));
        }
        let num_balls = r.u32()? as usize;
        let num_frames = r.u32()? as usize;
        let variant_id = r.u32()?;
        let variant = Variant::from_id(variant_id)
            .ok_or_else(|| Error::malformed("episode file", format!("variant id {variant_id}")))?;
        let seed = r.u64()?;
        let radius = r.f64()?;
        let speed = r.f64()?;
        let config = EpisodeConfig {
            num_balls,
            num_frames,
            variant,
            radius,
            speed,
            seed,
        };
        let mut states = Vec::with_capacity(num_frames);
        for _ in 0..num_frames {
            let mut frame = Vec::with_capacity(num_balls);
            for _ in 0..num_balls {
                let position = [r.f64()?, r.f64()?];
                let velocity = [r.f64()?, r.f64()?];
                let radius = r.f64()?;
                let color = r.u32()?;
                if color >= u32::from(NUM_COLORS) {
                    return Err(Error::malformed("episode file", format!("color {color}")));
                }
                frame.push(BallState {
                    position,
                    velocity,
                    radius,
                    color: color as u8,
                });
            }
            states.push(frame);
        }
        let count = r.u32()? as usize;
        let mut events = Vec::with_capacity(count);
        for _ in 0..count {
            let vals: Vec<i32> = (0..6).map(|_| r.i32()).collect::<Result<_>>()?;
            let bad = || Error::malformed("episode file", format!("event {vals:?}"));
            let kind = match vals[2] {
                0 => EventKind::Ball {
                    partner: usize::try_from(vals[3]).map_err(|_| bad())?,
                    partner_color: u8::try_from(vals[5]).map_err(|_| bad())?,
                },
                1 => EventKind::Wall(Wall::from_id(vals[4]).ok_or_else(bad)?),
                _ => return Err(bad()),
            };
            events.push(InteractionEvent {
                frame: usize::try_from(vals[0]).map_err(|_| bad())?,
                subject: usize::try_from(vals[1]).map_err(|_| bad())?,
                kind,
            });
        }
        if !r.is_empty() {
            return Err(Error::malformed("episode file", "trailing bytes"));
        }
        Ok(Episode {
            config,
            states,
            events,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Episode::from_bytes(&bytes)
    }
}

/// Random non-overlapping initial placement.
pub fn initial_state(config: &EpisodeConfig, rng: &mut impl Rng) -> Result<Vec<BallState>> {
    let r = config.radius;
    let mut balls: Vec<BallState> = Vec::with_capacity(config.num_balls);
    for _ in 0..config.num_balls {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let p = [rng.random_range(r..1.0 - r), rng.random_range(r..1.0 - r)];
            let clear = balls.iter().all(|b| {
                (b.position[0] - p[0]).hypot(b.position[1] - p[1]) > b.radius + r
            });
            if clear {
                placed = Some(p);
                break;
            }
        }
        let position = placed.ok_or(Error::InfeasiblePlacement {
            balls: config.num_balls,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let color = rng.random_range(0..NUM_COLORS);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        balls.push(BallState {
            position,
            velocity: [config.speed * angle.cos(), config.speed * angle.sin()],
            radius: r,
            color,
        });
    }
    Ok(balls)
}

pub fn generate_episode(config: &EpisodeConfig) -> Result<Episode> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut world = World::new(initial_state(config, &mut rng)?, config.variant);
    let mut states = Vec::with_capacity(config.num_frames);
    let mut events = Vec::new();
    states.push(world.balls.clone());
    for _ in 1..config.num_frames {
        events.extend(world.step());
        states.push(world.balls.clone());
    }
    Ok(Episode {
        config: *config,
        states,
        events,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `config.seed` is the master seed.
    pub config: EpisodeConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub episodes: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "ocvt-dataset-1";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed("manifest", e.to_string()))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<Episode>> {
        self.entries(split)
            .map(|e| Episode::read(&dir.join(&e.file)))
            .collect()
    }
}

/// Write `n_train + n_val + n_test` episodes under `out_dir` plus `manifest.json`.
///
/// Per-episode seeds are drawn from `config.seed` and are pairwise distinct.
pub fn generate_dataset(
    config: &EpisodeConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
    jobs: usize,
) -> Result<Manifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(n_train + n_val + n_test);
    for (split, count) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        for index in 0..count {
            let seed = loop {
                let s: u64 = rng.random();
                if seen.insert(s) {
                    break s;
                }
            };
            entries.push(ManifestEntry {
                split,
                index,
                seed,
                file: format!("{}/ep{index:05}.bin", split.name()),
            });
        }
    }

    for split in Split::ALL {
        let dir = out_dir.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let results = parallel_map(&entries, jobs, |entry| -> Result<()> {
        let ep = generate_episode(&EpisodeConfig {
            seed: entry.seed,
            ..*config
        })?;
        ep.write(&out_dir.join(&entry.file))
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        config: *config,
        n_train,
        n_val,
        n_test,
        episodes: entries,
    };
    let path: PathBuf = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::malformed("manifest", e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(x: f64, y: f64, vx: f64, vy: f64, r: f64, color: u8) -> BallState {
        BallState {
            position: [x, y],
            velocity: [vx, vy],
            radius: r,
            color,
        }
    }

    fn ball_event(frame: usize, partner_color: u8) -> InteractionEvent {
        InteractionEvent {
            frame,
            subject: 0,
            kind: EventKind::Ball {
                partner: 1,
                partner_color,
            },
        }
    }

    #[test]
    fn head_on_collision_exchanges_velocities() {
        let v = 0.02;
        let mut w = World::new(
            vec![
                ball(0.43, 0.5, v, 0.0, 0.05, 0),
                ball(0.57, 0.5, -v, 0.0, 0.05, 1),
            ],
            Variant::Mod1,
        );
        let events = w.step();
        assert_eq!(events.iter().filter(|e| e.is_ball()).count(), 2);
        assert_eq!(w.balls[0].velocity, [-v, 0.0]);
        assert_eq!(w.balls[1].velocity, [v, 0.0]);
    }

    #[test]
    fn first_right_wall_hit_matches_kinematics() {
        // contact when x + r >= 1: 0.55 + 0.02 n >= 1  =>  n = ceil(0.45 / 0.02) = 23
        let expected = (0.45f64 / 0.02).ceil() as usize;
        let mut w = World::new(vec![ball(0.5, 0.5, 0.02, 0.0, 0.05, 0)], Variant::Mod1);
        let hit = (1..100)
            .find(|_| !w.step().is_empty())
            .expect("the ball reaches the wall");
        assert_eq!(hit, expected);
        assert_eq!(w.balls[0].velocity, [-0.02, 0.0]);
    }

    #[test]
    fn resting_ball_is_a_fixed_point() {
        let b = ball(0.3, 0.6, 0.0, 0.0, 0.08, 2);
        let mut w = World::new(vec![b], Variant::Mod1);
        assert!(w.step().is_empty());
        assert_eq!(w.balls[0], b);
    }

    #[test]
    fn wall_color_rule_examples() {
        // cyan after meeting violet -> yellow
        assert_eq!(
            color_on_wall_hit(&[ball_event(4, 3)], 4, Variant::Mod1, Wall::Left),
            2
        );
        assert_eq!(
            color_on_wall_hit(&[ball_event(4, 0)], 0, Variant::Mod1, Wall::Left),
            0
        );
        // red; partners oldest..newest = cyan, violet, yellow; Mod3 reads the oldest
        let history = [ball_event(1, 4), ball_event(2, 3), ball_event(3, 2)];
        assert_eq!(color_on_wall_hit(&history, 1, Variant::Mod3, Wall::Top), 0);
    }

    #[test]
    fn wall_events_do_not_count_as_partners() {
        let wall = InteractionEvent {
            frame: 5,
            subject: 0,
            kind: EventKind::Wall(Wall::Left),
        };
        let history = [ball_event(1, 2), wall];
        assert_eq!(color_on_wall_hit(&history, 1, Variant::Mod1, Wall::Top), 3);
        assert_eq!(color_on_wall_hit(&history, 1, Variant::Mod2, Wall::Top), 1);
    }

    #[test]
    fn mod1234_lag_follows_wall() {
        let history = [
            ball_event(1, 1),
            ball_event(2, 2),
            ball_event(3, 3),
            ball_event(4, 4),
        ];
        let got: Vec<u8> = Wall::ALL
            .iter()
            .map(|&w| color_on_wall_hit(&history, 0, Variant::Mod1234, w))
            .collect();
        assert_eq!(got, vec![4, 3, 2, 1]);
    }

    #[test]
    fn single_ball_never_changes_color() {
        let ep = generate_episode(&EpisodeConfig {
            num_balls: 1,
            num_frames: 300,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(ep.events.iter().all(|e| !e.is_ball()));
        assert!(ep.color_changes().is_empty());
        assert!(ep.events.iter().any(|e| !e.is_ball()));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EpisodeConfig {
            seed: 11,
            ..Default::default()
        };
        let a = generate_episode(&cfg).unwrap();
        let b = generate_episode(&cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let cfg = EpisodeConfig {
            num_balls: 4,
            radius: 0.249,
            speed: 0.01,
            ..Default::default()
        };
        // passes the coarse packing check, fails rejection sampling
        cfg.validate().unwrap();
        assert!(matches!(
            generate_episode(&cfg),
            Err(Error::InfeasiblePlacement { balls: 4, .. })
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            EpisodeConfig {
                num_balls: 0,
                ..Default::default()
            },
            EpisodeConfig {
                num_frames: 1,
                ..Default::default()
            },
            EpisodeConfig {
                num_balls: 50,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn episode_bytes_roundtrip_and_truncation() {
        let ep = generate_episode(&EpisodeConfig {
            num_frames: 40,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let bytes = ep.to_bytes();
        assert_eq!(Episode::from_bytes(&bytes).unwrap(), ep);
        assert!(matches!(
            Episode::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Malformed { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Episode::from_bytes(&bad).is_err());
    }
}
