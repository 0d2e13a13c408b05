//! Discrete-time streetlight neighbourhood.
//!
//! Lights sit on the nodes of a rectangular grid (4-neighbour adjacency).
//! Every tick each managed light senses, asks its controller for a decision
//! and actuates; then pedestrians try to walk one node along their routes.
//! Every step is published as a log event through the world's [`Telemetry`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::log_model::LogClock;
use crate::neuroevolution::{decode, Genome, NetworkTopology, NeuroError};
use crate::site;
use crate::topic_broker::{BrokerError, LogSink, NullSink, Publisher};

/// Simulated microseconds per tick. Events of tick `t` are stamped inside
/// `[origin + (t + 1) * TICK_MICROS, origin + (t + 2) * TICK_MICROS)`.
pub const TICK_MICROS: u64 = 1_000_000;

pub const LIGHT_AGENT_TYPE: &str = "lightContainer";
pub const ADAPTIVE_AGENT_TYPE: &str = "AdaptiveAgent";
pub const ADAPTIVE_AGENT_NAME: &str = "lightsAgent";
pub const MANAGER_AGENT_TYPE: &str = "MANAGER";
pub const MANAGER_AGENT_NAME: &str = "manager01";
/// agentName used for world-wide events such as `finishSimulation`.
pub const WORLD_AGENT_NAME: &str = "lights";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("unknown fault kind {0:?}")]
    UnknownFault(String),
    #[error("fault targets unknown light {0:?}")]
    UnknownTarget(String),
    #[error("genome has {actual} genes, topology needs {expected}")]
    GenomeShapeMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Publish(#[from] BrokerError),
}

impl From<NeuroError> for WorldError {
    fn from(err: NeuroError) -> Self {
        match err {
            NeuroError::GenomeShapeMismatch { expected, actual } => {
                WorldError::GenomeShapeMismatch { expected, actual }
            }
            other => WorldError::InvalidConfig(other.to_string()),
        }
    }
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    /// Wireless reach in grid hops (Manhattan distance).
    pub wireless_range: usize,
    pub num_people: usize,
    pub max_ticks: u64,
    pub ambient_light: f64,
    pub light_brightness: f64,
    pub dark_threshold: f64,
    pub energy_per_tick_on: f64,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_width: 5,
            grid_height: 5,
            wireless_range: 1,
            num_people: 5,
            max_ticks: 200,
            ambient_light: 0.05,
            light_brightness: 0.8,
            dark_threshold: 0.15,
            energy_per_tick_on: 1.0,
            rng_seed: 7,
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "gridWidth",
    "gridHeight",
    "wirelessRange",
    "numPeople",
    "maxTicks",
    "ambientLight",
    "lightBrightness",
    "darkThreshold",
    "energyPerTickOn",
    "rngSeed",
];

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(WorldError::InvalidConfig(msg.to_string()));
        if self.grid_width == 0 || self.grid_height == 0 {
            return bad("grid dimensions must be positive");
        }
        if self.max_ticks == 0 {
            return bad("maxTicks must be positive");
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.ambient_light) || !unit(self.light_brightness) || !unit(self.dark_threshold) {
            return bad("light levels must lie in [0, 1]");
        }
        if self.dark_threshold >= self.light_brightness {
            return bad("darkThreshold must be below lightBrightness");
        }
        if !(self.energy_per_tick_on.is_finite() && self.energy_per_tick_on > 0.0) {
            return bad("energyPerTickOn must be positive");
        }
        // Timestamps reserve one tick-width of microseconds per tick.
        if self.grid_width.saturating_mul(self.grid_height) > 20_000 {
            return bad("grid is too large");
        }
        Ok(())
    }

    pub fn num_lights(&self) -> usize {
        self.grid_width * self.grid_height
    }

    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = || WorldError::InvalidConfig(format!("bad value {value:?} for {key}"));
        macro_rules! parse {
            ($field:expr) => {
                $field = value.parse().map_err(|_| err())?
            };
        }
        match key {
            "gridWidth" => parse!(self.grid_width),
            "gridHeight" => parse!(self.grid_height),
            "wirelessRange" => parse!(self.wireless_range),
            "numPeople" => parse!(self.num_people),
            "maxTicks" => parse!(self.max_ticks),
            "ambientLight" => parse!(self.ambient_light),
            "lightBrightness" => parse!(self.light_brightness),
            "darkThreshold" => parse!(self.dark_threshold),
            "energyPerTickOn" => parse!(self.energy_per_tick_on),
            "rngSeed" => parse!(self.rng_seed),
            _ => return Err(WorldError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` text on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                WorldError::InvalidConfig(format!("line {}: expected key=value", n + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv(&self) -> String {
        let values = [
            self.grid_width.to_string(),
            self.grid_height.to_string(),
            self.wireless_range.to_string(),
            self.num_people.to_string(),
            self.max_ticks.to_string(),
            self.ambient_light.to_string(),
            self.light_brightness.to_string(),
            self.dark_threshold.to_string(),
            self.energy_per_tick_on.to_string(),
            self.rng_seed.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// What a light's sensors report at the start of its turn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorFrame {
    pub light_level: f64,
    pub motion_detected: bool,
    /// Strongest neighbour broadcast from the previous tick.
    pub wireless_in: f64,
}

impl SensorFrame {
    /// Controller inputs: light level, motion as 0/1, wireless.
    pub fn inputs(&self) -> [f64; 3] {
        [
            self.light_level,
            if self.motion_detected { 1.0 } else { 0.0 },
            self.wireless_in,
        ]
    }
}

/// Controller decision, each value in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutputs {
    pub led: f64,
    pub wireless: f64,
}

/// Supplies a decision for every light.
pub trait ControllerBank {
    fn decide(&self, light: usize, frame: &SensorFrame) -> ControlOutputs;
}

impl<F> ControllerBank for F
where
    F: Fn(usize, &SensorFrame) -> ControlOutputs,
{
    fn decide(&self, light: usize, frame: &SensorFrame) -> ControlOutputs {
        self(light, frame)
    }
}

/// Same decision for every light, whatever it senses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantController(pub ControlOutputs);

impl ConstantController {
    pub fn all_on() -> Self {
        Self(ControlOutputs {
            led: 1.0,
            wireless: 0.0,
        })
    }
    pub fn all_off() -> Self {
        Self(ControlOutputs {
            led: -1.0,
            wireless: 0.0,
        })
    }
}

impl ControllerBank for ConstantController {
    fn decide(&self, _light: usize, _frame: &SensorFrame) -> ControlOutputs {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    /// Reports ON, emits no light and never confirms with `detectLight`.
    GoDark,
    /// Light sensor frozen at its value when the fault was installed.
    SensorStuck,
    /// Radio dead: broadcasts nothing and never logs `sendWirelessData`.
    MuteWireless,
    /// The manager never creates an adaptive agent for the light.
    SkipHandshake,
}

impl FromStr for FaultKind {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "go-dark" => Ok(FaultKind::GoDark),
            "sensor-stuck" => Ok(FaultKind::SensorStuck),
            "mute-wireless" => Ok(FaultKind::MuteWireless),
            "skip-handshake" => Ok(FaultKind::SkipHandshake),
            other => Err(WorldError::UnknownFault(other.to_string())),
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::GoDark => "go-dark",
            FaultKind::SensorStuck => "sensor-stuck",
            FaultKind::MuteWireless => "mute-wireless",
            FaultKind::SkipHandshake => "skip-handshake",
        })
    }
}

/// `<kind>:<lightId>[,<lightId>...]`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub targets: Vec<String>,
}

impl FromStr for FaultSpec {
    type Err = WorldError;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, targets) = s
            .split_once(':')
            .ok_or_else(|| WorldError::UnknownFault(s.to_string()))?;
        let targets: Vec<String> = targets
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        if targets.is_empty() {
            return Err(WorldError::UnknownTarget(String::new()));
        }
        Ok(FaultSpec {
            kind: kind.trim().parse()?,
            targets,
        })
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.targets.join(","))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultFlags {
    pub go_dark: bool,
    pub stuck_level: Option<f64>,
    pub mute_wireless: bool,
    pub unmanaged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Streetlight {
    pub id: String,
    pub x: usize,
    pub y: usize,
    pub light_on: bool,
    pub outbox: f64,
    pub faults: FaultFlags,
}

impl Streetlight {
    fn emitting(&self) -> bool {
        self.light_on && !self.faults.go_dark
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pedestrian {
    pub id: usize,
    /// Node indices from start to destination.
    pub route: Vec<usize>,
    pub position_index: usize,
    pub finished: bool,
    pub ticks_moving: u64,
}

impl Pedestrian {
    pub fn node(&self) -> usize {
        self.route[self.position_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub p_people: f64,
    pub p_trip: f64,
    pub p_energy: f64,
}

/// Where a world sends its events and how it stamps them.
#[derive(Clone)]
pub struct Telemetry {
    pub sink: Arc<dyn LogSink>,
    pub clock: Arc<LogClock>,
    /// Appended to every agentName as `name@<namespace>` when set.
    pub namespace: Option<String>,
    /// Drop world events entirely. Used for bulk evaluation.
    pub muted: bool,
}

impl Telemetry {
    pub fn new(sink: Arc<dyn LogSink>, clock: Arc<LogClock>) -> Self {
        Self {
            sink,
            clock,
            namespace: None,
            muted: false,
        }
    }

    /// Builds no events at all.
    pub fn silent() -> Self {
        Self::new(Arc::new(NullSink), Arc::new(LogClock::new())).muted(true)
    }

    pub fn muted(mut self, muted: bool) -> Self {
        self.muted = muted;
        self
    }

    pub fn with_namespace(mut self, namespace: impl Into<String>) -> Self {
        self.namespace = Some(namespace.into());
        self
    }

    pub fn publisher(&self, agent_type: &str, agent_name: &str) -> Publisher {
        let name = match &self.namespace {
            Some(ns) => format!("{agent_name}@{ns}"),
            None => agent_name.to_string(),
        };
        Publisher::new(
            Arc::clone(&self.sink),
            Arc::clone(&self.clock),
            agent_type,
            &name,
        )
        .muted(self.muted)
    }
}

impl fmt::Debug for Telemetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Telemetry")
            .field("namespace", &self.namespace)
            .field("muted", &self.muted)
            .finish_non_exhaustive()
    }
}

/// The live simulation.
#[derive(Debug)]
pub struct World {
    config: WorldConfig,
    lights: Vec<Streetlight>,
    people: Vec<Pedestrian>,
    tick: u64,
    on_light_ticks: u64,
    previous_outbox: Vec<f64>,
    origin: u64,
    clock: Arc<LogClock>,
    light_logs: Vec<Publisher>,
    adaptive: Publisher,
    manager: Publisher,
    world_log: Publisher,
    finished_published: bool,
}

/// Builds the world and runs the manager handshake for every light.
pub fn init_world(config: &WorldConfig, telemetry: &Telemetry) -> Result<World> {
    World::new(config, telemetry, &[])
}

impl World {
    /// Builds the world, installs `faults`, then publishes the handshake.
    pub fn new(config: &WorldConfig, telemetry: &Telemetry, faults: &[FaultSpec]) -> Result<Self> {
        config.validate()?;
        let width = config.grid_width;
        let lights: Vec<Streetlight> = (0..config.num_lights())
            .map(|i| Streetlight {
                id: format!("node{i}"),
                x: i % width,
                y: i / width,
                light_on: false,
                outbox: 0.0,
                faults: FaultFlags::default(),
            })
            .collect();
        let light_logs = lights
            .iter()
            .map(|l| telemetry.publisher(LIGHT_AGENT_TYPE, &l.id))
            .collect();
        let clock = Arc::clone(&telemetry.clock);
        let origin = clock.peek().div_ceil(TICK_MICROS) * TICK_MICROS;
        clock.advance_to(origin);
        let mut world = World {
            people: Vec::new(),
            previous_outbox: vec![0.0; lights.len()],
            lights,
            tick: 0,
            on_light_ticks: 0,
            origin,
            clock,
            light_logs,
            adaptive: telemetry.publisher(ADAPTIVE_AGENT_TYPE, ADAPTIVE_AGENT_NAME),
            manager: telemetry.publisher(MANAGER_AGENT_TYPE, MANAGER_AGENT_NAME),
            world_log: telemetry.publisher(LIGHT_AGENT_TYPE, WORLD_AGENT_NAME),
            config: config.clone(),
            finished_published: false,
        };
        world.people = world.plan_routes();
        for fault in faults {
            world.inject_fault(fault)?;
        }
        world.handshake()?;
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }
    pub fn lights(&self) -> &[Streetlight] {
        &self.lights
    }
    pub fn people(&self) -> &[Pedestrian] {
        &self.people
    }
    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Clock value at which the world started; tick timestamps are relative to it.
    pub fn origin(&self) -> u64 {
        self.origin
    }

    pub fn light_index(&self, id: &str) -> Option<usize> {
        self.lights.iter().position(|l| l.id == id)
    }

    /// Accumulated energy: `energyPerTickOn` times the ON-light count summed over ticks.
    pub fn energy(&self) -> f64 {
        self.on_light_ticks as f64 * self.config.energy_per_tick_on
    }

    pub fn on_light_ticks(&self) -> u64 {
        self.on_light_ticks
    }

    pub fn finished_count(&self) -> usize {
        self.people.iter().filter(|p| p.finished).count()
    }

    /// True once there are pedestrians and all of them have arrived.
    pub fn everyone_finished(&self) -> bool {
        !self.people.is_empty() && self.people.iter().all(|p| p.finished)
    }

    fn coords(&self, node: usize) -> (usize, usize) {
        (node % self.config.grid_width, node / self.config.grid_width)
    }

    fn hops(&self, a: usize, b: usize) -> usize {
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        ax.abs_diff(bx) + ay.abs_diff(by)
    }

    fn border_nodes(&self) -> Vec<usize> {
        let (w, h) = (self.config.grid_width, self.config.grid_height);
        (0..w * h)
            .filter(|&n| {
                let (x, y) = self.coords(n);
                x == 0 || y == 0 || x + 1 == w || y + 1 == h
            })
            .collect()
    }

    /// Seeded routes: two distinct random border nodes joined by a random
    /// shortest grid path.
    fn plan_routes(&self) -> Vec<Pedestrian> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        let border = self.border_nodes();
        (0..self.config.num_people)
            .map(|id| {
                let start = border[rng.random_range(0..border.len())];
                let end = if border.len() > 1 {
                    loop {
                        let candidate = border[rng.random_range(0..border.len())];
                        if candidate != start {
                            break candidate;
                        }
                    }
                } else {
                    start
                };
                let route = self.random_shortest_path(start, end, &mut rng);
                let finished = route.len() == 1;
                Pedestrian {
                    id,
                    route,
                    position_index: 0,
                    finished,
                    ticks_moving: 0,
                }
            })
            .collect()
    }

    fn random_shortest_path(&self, start: usize, end: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (sx, sy) = self.coords(start);
        let (ex, ey) = self.coords(end);
        let mut moves: Vec<bool> = std::iter::repeat_n(true, sx.abs_diff(ex))
            .chain(std::iter::repeat_n(false, sy.abs_diff(ey)))
            .collect();
        moves.shuffle(rng);
        let (mut x, mut y) = (sx, sy);
        let mut route = vec![start];
        for horizontal in moves {
            if horizontal {
                x = if ex > x { x + 1 } else { x - 1 };
            } else {
                y = if ey > y { y + 1 } else { y - 1 };
            }
            route.push(y * self.config.grid_width + x);
        }
        route
    }

    fn handshake(&mut self) -> Result<()> {
        for i in 0..self.lights.len() {
            let id = self.lights[i].id.clone();
            self.manager.info_with(
                site!("ManagerAgent", "detectSmartThing"),
                "receiveMsgFromSmartThing",
                &id,
                || format!("connection request from {id}"),
            )?;
            if self.lights[i].faults.unmanaged {
                continue;
            }
            self.manager.info_with(
                site!("ManagerAgent", "createAgent"),
                "createAdaptiveAgent",
                &id,
                || "control=neuralController inputs=3 outputs=2",
            )?;
            self.adaptive
                .info_with(site!("AdaptiveAgent", "setup"), "connect", &id, || {
                    format!("controls {id}")
                })?;
            self.manager.info_with(
                site!("ManagerAgent", "confirmConnection"),
                "sendMsgToSmartThing",
                &id,
                || "connected",
            )?;
            self.adaptive.info_with(
                site!("AdaptiveAgent", "collectData"),
                "receiveInputDataFromSmartThing",
                &id,
                || "initial frame",
            )?;
        }
        Ok(())
    }

    /// Installs a fault on every target light.
    pub fn inject_fault(&mut self, spec: &FaultSpec) -> Result<()> {
        let indices = spec
            .targets
            .iter()
            .map(|t| {
                self.light_index(t)
                    .ok_or_else(|| WorldError::UnknownTarget(t.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        for i in indices {
            let level = self.perceived_light(i);
            let flags = &mut self.lights[i].faults;
            match spec.kind {
                FaultKind::GoDark => flags.go_dark = true,
                FaultKind::SensorStuck => flags.stuck_level = Some(level),
                FaultKind::MuteWireless => flags.mute_wireless = true,
                FaultKind::SkipHandshake => flags.unmanaged = true,
            }
        }
        Ok(())
    }

    /// Light reaching `node`: ambient plus the node's own lamp when it emits.
    pub fn perceived_light(&self, node: usize) -> f64 {
        let own = if self.lights[node].emitting() {
            self.config.light_brightness
        } else {
            0.0
        };
        (self.config.ambient_light + own).clamp(0.0, 1.0)
    }

    fn light_sensor(&self, light: usize) -> f64 {
        self.lights[light]
            .faults
            .stuck_level
            .unwrap_or_else(|| self.perceived_light(light))
    }

    fn motion_near(&self, light: usize) -> bool {
        self.people
            .iter()
            .any(|p| !p.finished && self.hops(p.node(), light) <= 1)
    }

    fn wireless_in(&self, light: usize) -> f64 {
        let range = self.config.wireless_range;
        (0..self.lights.len())
            .filter(|&other| other != light && self.hops(other, light) <= range)
            .map(|other| self.previous_outbox[other])
            .fold(0.0, f64::max)
    }

    /// Reads every sensor of `light`, publishing one log per reading.
    pub fn sense(&self, light: usize) -> Result<SensorFrame> {
        let frame = SensorFrame {
            light_level: self.light_sensor(light),
            motion_detected: self.motion_near(light),
            wireless_in: self.wireless_in(light),
        };
        let log = &self.light_logs[light];
        log.info_with(
            site!("Streetlight", "sense"),
            "receiveWirelessData",
            "wirelessReceiver",
            || format!("value={:.6}", frame.wireless_in),
        )?;
        log.info_with(
            site!("Streetlight", "sense"),
            "readLightSensor",
            "lightSensor",
            || format!("value={:.6}", frame.light_level),
        )?;
        log.info_with(
            site!("Streetlight", "sense"),
            "readMotionSensor",
            "motionSensor",
            || format!("value={}", u8::from(frame.motion_detected)),
        )?;
        log.info_with(
            site!("Streetlight", "sense"),
            "sendMsg",
            "msgAdaptiveAgent",
            || format!("frame={:?}", frame.inputs()),
        )?;
        Ok(frame)
    }

    /// Applies a controller decision to `light`.
    pub fn actuate(&mut self, light: usize, decision: ControlOutputs) -> Result<()> {
        let log = self.light_logs[light].clone();
        log.info_with(
            site!("Streetlight", "actuate"),
            "receiveNeuralNetworkCommand",
            "neuralController",
            || format!("led={:.6} wireless={:.6}", decision.led, decision.wireless),
        )?;
        let on = decision.led > 0.0;
        self.lights[light].light_on = on;
        let action = if on {
            "switchLightON"
        } else {
            "switchLightOFF"
        };
        log.info_with(site!("Streetlight", "actuate"), action, "led", || "")?;

        let mute = self.lights[light].faults.mute_wireless;
        self.lights[light].outbox = if mute {
            0.0
        } else {
            decision.wireless.max(0.0)
        };
        if !mute {
            log.info_with(
                site!("Streetlight", "actuate"),
                "sendWirelessData",
                "wirelessTransmitter",
                || format!("value={:.6}", self.lights[light].outbox),
            )?;
        }

        if on {
            let level = self.light_sensor(light);
            if level >= self.config.light_brightness {
                log.info_with(
                    site!("Streetlight", "actuate"),
                    "detectLight",
                    "lightSensor",
                    || format!("value={level:.6}"),
                )?;
            }
        }
        Ok(())
    }

    /// Moves each unfinished pedestrian one node when both its node and the
    /// next one are lit above the dark threshold.
    pub fn move_people(&mut self) {
        let threshold = self.config.dark_threshold;
        for p in 0..self.people.len() {
            if self.people[p].finished {
                continue;
            }
            let here = self.people[p].node();
            let next = self.people[p].route[self.people[p].position_index + 1];
            let can_move =
                self.perceived_light(here) > threshold && self.perceived_light(next) > threshold;
            let walker = &mut self.people[p];
            walker.ticks_moving += 1;
            if can_move {
                walker.position_index += 1;
                walker.finished = walker.position_index + 1 == walker.route.len();
            }
        }
    }

    /// One tick: sense, decide and act for every light, then move people and
    /// account energy.
    pub fn step(&mut self, controller: &dyn ControllerBank) -> Result<()> {
        self.clock
            .advance_to(self.origin + (self.tick + 1) * TICK_MICROS);
        self.previous_outbox = self.lights.iter().map(|l| l.outbox).collect();
        for light in 0..self.lights.len() {
            let frame = self.sense(light)?;
            if self.lights[light].faults.unmanaged {
                continue;
            }
            let id = self.lights[light].id.clone();
            self.adaptive.info_with(
                site!("AdaptiveAgent", "collectData"),
                "receiveInputDataFromSmartThing",
                &id,
                || format!("inputs={:?}", frame.inputs()),
            )?;
            let decision = controller.decide(light, &frame);
            self.adaptive.info_with(
                site!("AdaptiveAgent", "makeDecision"),
                "useControllerToGetOutput",
                &id,
                || format!("led={:.6} wireless={:.6}", decision.led, decision.wireless),
            )?;
            self.adaptive.info_with(
                site!("AdaptiveAgent", "takeAction"),
                "sendOutputToSmartThing",
                &id,
                || "",
            )?;
            self.actuate(light, decision)?;
        }
        self.move_people();
        self.on_light_ticks += self.lights.iter().filter(|l| l.light_on).count() as u64;
        self.tick += 1;
        Ok(())
    }

    /// Publishes `finishSimulation` once.
    pub fn finish(&mut self) -> Result<()> {
        if !self.finished_published {
            self.clock
                .advance_to(self.origin + (self.tick + 1) * TICK_MICROS);
            self.world_log.info_with(
                site!("World", "finish"),
                "finishSimulation",
                "simulation",
                || {
                    format!(
                        "ticks={} finished={}/{}",
                        self.tick,
                        self.finished_count(),
                        self.people.len()
                    )
                },
            )?;
            self.finished_published = true;
        }
        Ok(())
    }

    /// Metrics over the ticks run so far, normalised by `maxTicks`.
    pub fn metrics(&self) -> EpisodeMetrics {
        let people = self.people.len();
        let max_ticks = self.config.max_ticks as f64;
        if people == 0 {
            return EpisodeMetrics {
                p_people: 1.0,
                p_trip: 0.0,
                p_energy: self.energy_fraction(),
            };
        }
        let moving: u64 = self.people.iter().map(|p| p.ticks_moving).sum();
        EpisodeMetrics {
            p_people: self.finished_count() as f64 / people as f64,
            p_trip: moving as f64 / (people as f64 * max_ticks),
            p_energy: self.energy_fraction(),
        }
    }

    fn energy_fraction(&self) -> f64 {
        let max = self.lights.len() as f64
            * self.config.max_ticks as f64
            * self.config.energy_per_tick_on;
        self.energy() / max
    }
}

/// Runs until `maxTicks` or until every pedestrian has arrived, then
/// publishes `finishSimulation`.
pub fn run_episode_with(
    config: &WorldConfig,
    controller: &dyn ControllerBank,
    telemetry: &Telemetry,
    faults: &[FaultSpec],
) -> Result<EpisodeMetrics> {
    let mut world = World::new(config, telemetry, faults)?;
    while world.tick() < config.max_ticks && !world.everyone_finished() {
        world.step(controller)?;
    }
    world.finish()?;
    Ok(world.metrics())
}

/// Decodes `genome` and runs one episode with it controlling every light.
pub fn run_episode(
    config: &WorldConfig,
    genome: &Genome,
    topology: &NetworkTopology,
    telemetry: &Telemetry,
    faults: &[FaultSpec],
) -> Result<EpisodeMetrics> {
    let controller = decode(genome, topology)?;
    run_episode_with(config, &controller, telemetry, faults)
}
