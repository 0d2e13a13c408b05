//! Genetic algorithm over the weights of a small feedforward controller, and
//! the observer that drives evaluation and reports through the log protocol.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::site;
use crate::streetlight_world::{
    run_episode, ControlOutputs, ControllerBank, EpisodeMetrics, FaultSpec, SensorFrame, Telemetry,
    WorldConfig, WorldError,
};
use crate::topic_broker::{BrokerError, Publisher};

pub const INPUT_COUNT: usize = 3;
pub const OUTPUT_COUNT: usize = 2;
pub const DEFAULT_HIDDEN_COUNT: usize = 4;
pub const DEFAULT_GENE_LIMIT: f64 = 5.0;
pub const DEFAULT_ENERGY_TARGET: f64 = 0.70;

pub const OBSERVER_AGENT_TYPE: &str = "OBSERVER";
pub const OBSERVER_AGENT_NAME: &str = "observer01";

/// Evolved controller shipped with the crate, written by `mastest evolve`.
pub const DEMO_GENOME: &str = include_str!("../assets/demo.genome");

const FITNESS_PEOPLE_WEIGHT: f64 = 1.0;
const FITNESS_TRIP_WEIGHT: f64 = 0.6;
const FITNESS_ENERGY_WEIGHT: f64 = 0.4;

#[derive(Debug, Error)]
pub enum NeuroError {
    #[error("genome has {actual} genes, topology needs {expected}")]
    GenomeShapeMismatch { expected: usize, actual: usize },
    #[error("metric {name}={value} outside [0, 1]")]
    MetricsOutOfRange { name: &'static str, value: f64 },
    #[error("invalid GA config: {0}")]
    InvalidConfig(String),
    #[error("genome file line {line}: {message}")]
    GenomeFormat { line: usize, message: String },
    #[error("genome {index} has not been evaluated")]
    Unevaluated { index: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Publish(#[from] BrokerError),
}

pub type Result<T, E = NeuroError> = std::result::Result<T, E>;

/// 3 inputs, one tanh hidden layer, 2 tanh outputs, biases on both layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkTopology {
    pub hidden_count: usize,
}

impl Default for NetworkTopology {
    fn default() -> Self {
        Self {
            hidden_count: DEFAULT_HIDDEN_COUNT,
        }
    }
}

impl NetworkTopology {
    pub fn new(hidden_count: usize) -> Self {
        Self { hidden_count }
    }

    pub fn input_count(&self) -> usize {
        INPUT_COUNT
    }

    pub fn output_count(&self) -> usize {
        OUTPUT_COUNT
    }

    pub fn genome_len(&self) -> usize {
        (INPUT_COUNT + 1) * self.hidden_count + (self.hidden_count + 1) * OUTPUT_COUNT
    }
}

impl fmt::Display for NetworkTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", INPUT_COUNT, self.hidden_count, OUTPUT_COUNT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub genes: Vec<f64>,
    pub fitness: Option<f64>,
}

impl Genome {
    pub fn new(genes: Vec<f64>) -> Self {
        Self {
            genes,
            fitness: None,
        }
    }

    pub fn zeros(topology: &NetworkTopology) -> Self {
        Self::new(vec![0.0; topology.genome_len()])
    }

    /// Genes uniform in [-1, 1].
    pub fn random(topology: &NetworkTopology, rng: &mut impl Rng) -> Self {
        Self::new(
            (0..topology.genome_len())
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    /// Header line with the topology, then one gene per line.
    pub fn to_text(&self, topology: &NetworkTopology) -> String {
        let mut text = format!("{topology}\n");
        for gene in &self.genes {
            text.push_str(&format!("{gene}\n"));
        }
        text
    }

    pub fn from_text(text: &str) -> Result<(Genome, NetworkTopology)> {
        let bad = |line: usize, message: String| NeuroError::GenomeFormat { line, message };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (n, header) = lines
            .next()
            .ok_or_else(|| bad(1, "empty genome file".to_string()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|d| {
                d.parse()
                    .map_err(|_| bad(n, format!("bad topology {header:?}")))
            })
            .collect::<Result<_>>()?;
        if dims.len() != 3 || dims[0] != INPUT_COUNT || dims[2] != OUTPUT_COUNT || dims[1] == 0 {
            return Err(bad(n, format!("unsupported topology {header:?}")));
        }
        let topology = NetworkTopology::new(dims[1]);
        let genes = lines
            .map(|(n, l)| match l.parse::<f64>() {
                Ok(g) if g.is_finite() => Ok(g),
                _ => Err(bad(n, format!("bad gene {l:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if genes.len() != topology.genome_len() {
            return Err(NeuroError::GenomeShapeMismatch {
                expected: topology.genome_len(),
                actual: genes.len(),
            });
        }
        Ok((Genome::new(genes), topology))
    }

    pub fn save(&self, topology: &NetworkTopology, path: &Path) -> Result<()> {
        fs::write(path, self.to_text(topology))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Genome, NetworkTopology)> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Parses [`DEMO_GENOME`].
pub fn demo_genome() -> (Genome, NetworkTopology) {
    Genome::from_text(DEMO_GENOME).expect("shipped demo genome parses")
}

/// Decoded weights. Gene order: input→hidden weights row-major by hidden
/// unit, hidden biases, hidden→output weights row-major by output unit,
/// output biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralController {
    hidden_count: usize,
    w1: Vec<[f64; INPUT_COUNT]>,
    b1: Vec<f64>,
    w2: [Vec<f64>; OUTPUT_COUNT],
    b2: [f64; OUTPUT_COUNT],
}

pub fn decode(genome: &Genome, topology: &NetworkTopology) -> Result<NeuralController> {
    let expected = topology.genome_len();
    if genome.len() != expected {
        return Err(NeuroError::GenomeShapeMismatch {
            expected,
            actual: genome.len(),
        });
    }
    let h = topology.hidden_count;
    let g = &genome.genes;
    let w1 = (0..h)
        .map(|j| {
            let row = &g[j * INPUT_COUNT..(j + 1) * INPUT_COUNT];
            [row[0], row[1], row[2]]
        })
        .collect();
    let mut at = h * INPUT_COUNT;
    let b1 = g[at..at + h].to_vec();
    at += h;
    let w2 = [g[at..at + h].to_vec(), g[at + h..at + 2 * h].to_vec()];
    at += 2 * h;
    let b2 = [g[at], g[at + 1]];
    Ok(NeuralController {
        hidden_count: h,
        w1,
        b1,
        w2,
        b2,
    })
}

impl NeuralController {
    pub fn topology(&self) -> NetworkTopology {
        NetworkTopology::new(self.hidden_count)
    }

    fn hidden(&self, inputs: &[f64; INPUT_COUNT]) -> Vec<f64> {
        self.w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| (row.iter().zip(inputs).map(|(w, x)| w * x).sum::<f64>() + b).tanh())
            .collect()
    }

    pub fn forward(&self, inputs: &[f64; INPUT_COUNT]) -> [f64; OUTPUT_COUNT] {
        let hidden = self.hidden(inputs);
        let out = |o: usize| {
            (self.w2[o]
                .iter()
                .zip(&hidden)
                .map(|(w, h)| w * h)
                .sum::<f64>()
                + self.b2[o])
                .tanh()
        };
        [out(0), out(1)]
    }

    /// d output / d input, `[output][input]`.
    pub fn jacobian(&self, inputs: &[f64; INPUT_COUNT]) -> [[f64; INPUT_COUNT]; OUTPUT_COUNT] {
        let hidden = self.hidden(inputs);
        let outputs = self.forward(inputs);
        let mut jac = [[0.0; INPUT_COUNT]; OUTPUT_COUNT];
        for (o, row) in jac.iter_mut().enumerate() {
            let d_out = 1.0 - outputs[o] * outputs[o];
            for (i, cell) in row.iter_mut().enumerate() {
                *cell = d_out
                    * (0..self.hidden_count)
                        .map(|j| self.w2[o][j] * (1.0 - hidden[j] * hidden[j]) * self.w1[j][i])
                        .sum::<f64>();
            }
        }
        jac
    }
}

impl ControllerBank for NeuralController {
    fn decide(&self, _light: usize, frame: &SensorFrame) -> ControlOutputs {
        let [led, wireless] = self.forward(&frame.inputs());
        ControlOutputs { led, wireless }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessReport {
    pub metrics: EpisodeMetrics,
    pub fitness: f64,
    pub energy_target_met: bool,
    pub people_target_met: bool,
}

/// Scores an episode against the default energy target.
pub fn fitness(metrics: EpisodeMetrics) -> Result<FitnessReport> {
    fitness_with_target(metrics, DEFAULT_ENERGY_TARGET)
}

pub fn fitness_with_target(metrics: EpisodeMetrics, energy_target: f64) -> Result<FitnessReport> {
    for (name, value) in [
        ("pPeople", metrics.p_people),
        ("pTrip", metrics.p_trip),
        ("pEnergy", metrics.p_energy),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(NeuroError::MetricsOutOfRange { name, value });
        }
    }
    let fitness = FITNESS_PEOPLE_WEIGHT * metrics.p_people
        - FITNESS_TRIP_WEIGHT * metrics.p_trip
        - FITNESS_ENERGY_WEIGHT * metrics.p_energy;
    Ok(FitnessReport {
        metrics,
        fitness,
        energy_target_met: metrics.p_energy < energy_target,
        people_target_met: metrics.p_people == 1.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub elitism: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub mutation_sigma: f64,
    pub gene_limit: f64,
    pub rng_seed: u64,
    pub hidden_count: usize,
    pub energy_target: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 40,
            generations: 30,
            elitism: 2,
            tournament_size: 3,
            crossover_rate: 0.8,
            mutation_rate: 0.05,
            mutation_sigma: 0.3,
            gene_limit: DEFAULT_GENE_LIMIT,
            rng_seed: 7,
            hidden_count: DEFAULT_HIDDEN_COUNT,
            energy_target: DEFAULT_ENERGY_TARGET,
        }
    }
}

const GA_KEYS: [&str; 11] = [
    "populationSize",
    "generations",
    "elitism",
    "tournamentSize",
    "crossoverRate",
    "mutationRate",
    "mutationSigma",
    "geneLimit",
    "rngSeed",
    "hiddenCount",
    "energyTarget",
];

impl GaConfig {
    pub fn topology(&self) -> NetworkTopology {
        NetworkTopology::new(self.hidden_count)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NeuroError::InvalidConfig(msg.to_string()));
        if self.population_size == 0 {
            return bad("populationSize must be positive");
        }
        // elitism == populationSize is allowed: the whole population carries over.
        if self.elitism == 0 || self.elitism > self.population_size {
            return bad("elitism must be in 1..=populationSize");
        }
        if self.tournament_size == 0 {
            return bad("tournamentSize must be positive");
        }
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        if !rate(self.crossover_rate) || !rate(self.mutation_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.mutation_sigma.is_finite() && self.mutation_sigma >= 0.0) {
            return bad("mutationSigma must be non-negative");
        }
        if !(self.gene_limit.is_finite() && self.gene_limit >= 1.0) {
            return bad("geneLimit must be at least 1");
        }
        if self.hidden_count == 0 {
            return bad("hiddenCount must be positive");
        }
        if !(self.energy_target > 0.0 && self.energy_target <= 1.0) {
            return bad("energyTarget must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let err = || NeuroError::InvalidConfig(format!("bad value {value:?} for {key}"));
        macro_rules! parse {
            ($field:expr) => {
                $field = value.parse().map_err(|_| err())?
            };
        }
        match key {
            "populationSize" => parse!(self.population_size),
            "generations" => parse!(self.generations),
            "elitism" => parse!(self.elitism),
            "tournamentSize" => parse!(self.tournament_size),
            "crossoverRate" => parse!(self.crossover_rate),
            "mutationRate" => parse!(self.mutation_rate),
            "mutationSigma" => parse!(self.mutation_sigma),
            "geneLimit" => parse!(self.gene_limit),
            "rngSeed" => parse!(self.rng_seed),
            "hiddenCount" => parse!(self.hidden_count),
            "energyTarget" => parse!(self.energy_target),
            _ => return Err(NeuroError::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                NeuroError::InvalidConfig(format!("line {}: expected key=value", n + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv(&self) -> String {
        let values = [
            self.population_size.to_string(),
            self.generations.to_string(),
            self.elitism.to_string(),
            self.tournament_size.to_string(),
            self.crossover_rate.to_string(),
            self.mutation_rate.to_string(),
            self.mutation_sigma.to_string(),
            self.gene_limit.to_string(),
            self.rng_seed.to_string(),
            self.hidden_count.to_string(),
            self.energy_target.to_string(),
        ];
        GA_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

fn fitness_of(population: &[Genome], index: usize) -> Result<f64> {
    population[index]
        .fitness
        .ok_or(NeuroError::Unevaluated { index })
}

/// Indices ordered best first; equal fitness keeps the lower index first.
pub fn rank(population: &[Genome]) -> Result<Vec<usize>> {
    let scores = (0..population.len())
        .map(|i| fitness_of(population, i))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Draws `tournamentSize` indices with replacement and returns the fittest.
pub fn tournament(population: &[Genome], size: usize, rng: &mut impl Rng) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..size {
        let i = rng.random_range(0..population.len());
        let f = fitness_of(population, i)?;
        best = match best {
            Some((j, g)) if g > f || (g == f && j < i) => Some((j, g)),
            _ => Some((i, f)),
        };
    }
    Ok(best.map(|(i, _)| i).unwrap_or(0))
}

/// Builds the next population: elites first (fitness kept), then offspring
/// with no fitness.
pub fn evolve_generation(
    population: &[Genome],
    config: &GaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Genome>> {
    let order = rank(population)?;
    let elites = config.elitism.min(population.len());
    let mut next: Vec<Genome> = order[..elites]
        .iter()
        .map(|&i| population[i].clone())
        .collect();
    let noise = Normal::new(0.0, config.mutation_sigma)
        .map_err(|e| NeuroError::InvalidConfig(e.to_string()))?;
    let limit = config.gene_limit;
    while next.len() < config.population_size {
        let a = tournament(population, config.tournament_size, rng)?;
        let b = tournament(population, config.tournament_size, rng)?;
        let (pa, pb) = (&population[a].genes, &population[b].genes);
        let mut genes = if pa.len() > 1 && rng.random::<f64>() < config.crossover_rate {
            let cut = rng.random_range(1..pa.len());
            pa[..cut].iter().chain(&pb[cut..]).copied().collect()
        } else {
            pa.clone()
        };
        for gene in &mut genes {
            if rng.random::<f64>() < config.mutation_rate {
                *gene = (*gene + noise.sample(rng)).clamp(-limit, limit);
            }
        }
        next.push(Genome::new(genes));
    }
    Ok(next)
}

/// One line of the per-generation history file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationSummary {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub p_energy: f64,
    pub p_people: f64,
}

impl GenerationSummary {
    /// `generation best mean pEnergy pPeople`, tab separated.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.generation, self.best, self.mean, self.p_energy, self.p_people
        )
    }

    pub fn from_line(line: &str) -> Option<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return None;
        }
        Some(Self {
            generation: fields[0].parse().ok()?,
            best: fields[1].parse().ok()?,
            mean: fields[2].parse().ok()?,
            p_energy: fields[3].parse().ok()?,
            p_people: fields[4].parse().ok()?,
        })
    }
}

/// Observer-side log protocol.
#[derive(Debug, Clone)]
pub struct Observer {
    log: Publisher,
    energy_target: f64,
}

impl Observer {
    pub fn new(telemetry: &Telemetry, energy_target: f64) -> Self {
        let mut plain = telemetry.clone();
        plain.namespace = None;
        plain.muted = false;
        Self {
            log: plain.publisher(OBSERVER_AGENT_TYPE, OBSERVER_AGENT_NAME),
            energy_target,
        }
    }

    /// Everything before the episode runs.
    pub fn prepare(
        &self,
        genome: &Genome,
        topology: &NetworkTopology,
        index: usize,
    ) -> Result<NeuralController> {
        self.log.info_with(
            site!("ObserverAgent", "adapt"),
            "chooseAdaptationMethod",
            "neuroevolution",
            || format!("individual={index}"),
        )?;
        self.log.info_with(
            site!("ObserverAgent", "adapt"),
            "selectNeuralConfiguration",
            "neuralNetwork",
            || {
                format!(
                    "topology={}-{}-{}",
                    INPUT_COUNT, topology.hidden_count, OUTPUT_COUNT
                )
            },
        )?;
        let controller = decode(genome, topology)?;
        self.log.info_with(
            site!("ObserverAgent", "adapt"),
            "useIndividualGenesToANN",
            "neuralNetwork",
            || format!("genes={}", genome.len()),
        )?;
        self.log.info_with(
            site!("ObserverAgent", "evaluate"),
            "startExecutionWithControllerConfiguration",
            "simulation",
            || format!("individual={index}"),
        )?;
        Ok(controller)
    }

    /// Everything after the episode: read the results and score them.
    pub fn conclude(&self, metrics: EpisodeMetrics) -> Result<FitnessReport> {
        self.log.info_with(
            site!("ObserverAgent", "evaluate"),
            "readSimulationResults",
            "simulation",
            || {
                format!(
                    "pPeople={} pTrip={} pEnergy={}",
                    metrics.p_people, metrics.p_trip, metrics.p_energy
                )
            },
        )?;
        let report = fitness_with_target(metrics, self.energy_target)?;
        self.publish_fitness(&report)?;
        Ok(report)
    }

    /// Energy, people and trip results with their target checks, then the
    /// fitness value.
    pub fn publish_fitness(&self, report: &FitnessReport) -> Result<()> {
        let m = report.metrics;
        let s = || site!("ObserverAgent", "calculateFitness");
        self.log.info_with(s(), "calculateEnergy", "fitness", || {
            format!("pEnergy={}", m.p_energy)
        })?;
        if report.energy_target_met {
            self.log
                .info_with(s(), "achieveEnergyTarget", "fitness", || {
                    format!("pEnergy={} target={}", m.p_energy, self.energy_target)
                })?;
        }
        self.log.info_with(s(), "calculatePeople", "fitness", || {
            format!("pPeople={}", m.p_people)
        })?;
        if report.people_target_met {
            self.log
                .info_with(s(), "achievePeopleTarget", "fitness", || {
                    "everybody finished"
                })?;
        }
        self.log
            .info_with(s(), "calculateTripDuration", "fitness", || {
                format!("pTrip={}", m.p_trip)
            })?;
        self.log.info_with(s(), "calculateFitness", "fitness", || {
            format!("fitness={}", report.fitness)
        })?;
        Ok(())
    }

    pub fn announce_generation(&self, generation: usize) -> Result<()> {
        self.log.info_with(
            site!("ObserverAgent", "evolve"),
            "startGeneticAlgorithm",
            "population",
            || format!("generation={generation}"),
        )?;
        self.log.info_with(
            site!("ObserverAgent", "evolve"),
            "selectBestIndividuals",
            "population",
            || format!("generation={generation}"),
        )?;
        Ok(())
    }

    /// The whole per-individual protocol around one episode.
    pub fn evaluate(
        &self,
        genome: &Genome,
        topology: &NetworkTopology,
        index: usize,
        world: &WorldConfig,
        episode: &Telemetry,
        faults: &[FaultSpec],
    ) -> Result<FitnessReport> {
        let controller = self.prepare(genome, topology, index)?;
        let metrics =
            crate::streetlight_world::run_episode_with(world, &controller, episode, faults)?;
        self.conclude(metrics)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ObserverOptions {
    /// Publish world events of evolution episodes under `<agentName>@ep<k>`.
    /// Ignored when `parallel` is set.
    pub log_episodes: bool,
    /// Run a generation's episodes on the rayon pool with muted worlds;
    /// observer events are then published in population order.
    pub parallel: bool,
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, Clone)]
pub struct ObserverResult {
    pub best: Genome,
    pub topology: NetworkTopology,
    pub history: Vec<GenerationSummary>,
    pub final_report: FitnessReport,
    /// Episodes run during evolution, excluding the final re-run.
    pub evaluations: usize,
}

impl ObserverResult {
    pub fn history_text(&self) -> String {
        self.history
            .iter()
            .map(|s| format!("{}\n", s.to_line()))
            .collect()
    }
}

struct Evaluator<'a> {
    observer: Observer,
    world: &'a WorldConfig,
    topology: NetworkTopology,
    telemetry: &'a Telemetry,
    options: &'a ObserverOptions,
    episodes: usize,
}

impl Evaluator<'_> {
    /// Fills in the fitness of every unevaluated genome.
    fn evaluate_missing(&mut self, population: &mut [Genome]) -> Result<()> {
        let pending: Vec<usize> = (0..population.len())
            .filter(|&i| population[i].fitness.is_none())
            .collect();
        if self.options.parallel {
            let metrics = pending
                .par_iter()
                .map(|&i| {
                    let controller = decode(&population[i], &self.topology)?;
                    Ok(crate::streetlight_world::run_episode_with(
                        self.world,
                        &controller,
                        &Telemetry::silent(),
                        &self.options.faults,
                    )?)
                })
                .collect::<Result<Vec<EpisodeMetrics>>>()?;
            for (&i, m) in pending.iter().zip(metrics) {
                self.observer.prepare(&population[i], &self.topology, i)?;
                population[i].fitness = Some(self.observer.conclude(m)?.fitness);
            }
            self.episodes += pending.len();
        } else {
            for i in pending {
                let episode = self
                    .telemetry
                    .clone()
                    .with_namespace(format!("ep{}", self.episodes))
                    .muted(!self.options.log_episodes);
                let report = self.observer.evaluate(
                    &population[i],
                    &self.topology,
                    i,
                    self.world,
                    &episode,
                    &self.options.faults,
                )?;
                population[i].fitness = Some(report.fitness);
                self.episodes += 1;
            }
        }
        Ok(())
    }

    fn summarise(&self, generation: usize, population: &[Genome]) -> Result<GenerationSummary> {
        let best = rank(population)?[0];
        let genome = &population[best];
        let controller = decode(genome, &self.topology)?;
        let metrics = crate::streetlight_world::run_episode_with(
            self.world,
            &controller,
            &Telemetry::silent(),
            &self.options.faults,
        )?;
        let scores: Vec<f64> = population.iter().filter_map(|g| g.fitness).collect();
        Ok(GenerationSummary {
            generation,
            best: genome.fitness.unwrap_or(f64::NAN),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            p_energy: metrics.p_energy,
            p_people: metrics.p_people,
        })
    }
}

/// Seeded evolution followed by a fully logged re-run of the best genome.
/// Every episode uses the same world seed.
pub fn run_observer(
    world: &WorldConfig,
    ga: &GaConfig,
    telemetry: &Telemetry,
    options: &ObserverOptions,
) -> Result<ObserverResult> {
    ga.validate()?;
    world.validate()?;
    let topology = ga.topology();
    let mut rng = ChaCha8Rng::seed_from_u64(ga.rng_seed);
    let mut population: Vec<Genome> = (0..ga.population_size)
        .map(|_| Genome::random(&topology, &mut rng))
        .collect();
    let mut evaluator = Evaluator {
        observer: Observer::new(telemetry, ga.energy_target),
        world,
        topology,
        telemetry,
        options,
        episodes: 0,
    };
    evaluator.evaluate_missing(&mut population)?;

    let mut history = Vec::with_capacity(ga.generations);
    for generation in 0..ga.generations {
        if generation > 0 {
            evaluator.observer.announce_generation(generation)?;
            population = evolve_generation(&population, ga, &mut rng)?;
            evaluator.evaluate_missing(&mut population)?;
        }
        history.push(evaluator.summarise(generation, &population)?);
    }

    let best = population[rank(&population)?[0]].clone();
    let final_report = evaluator.observer.evaluate(
        &best,
        &topology,
        0,
        world,
        &telemetry.clone().muted(false),
        &options.faults,
    )?;
    Ok(ObserverResult {
        best,
        topology,
        history,
        final_report,
        evaluations: evaluator.episodes,
    })
}

/// Observer protocol around a single fully logged episode of `genome`.
pub fn evaluate_genome(
    world: &WorldConfig,
    genome: &Genome,
    topology: &NetworkTopology,
    telemetry: &Telemetry,
    energy_target: f64,
    faults: &[FaultSpec],
) -> Result<FitnessReport> {
    Observer::new(telemetry, energy_target).evaluate(genome, topology, 0, world, telemetry, faults)
}

/// Metrics of one episode, without any observer events.
pub fn episode_metrics(
    world: &WorldConfig,
    genome: &Genome,
    topology: &NetworkTopology,
    faults: &[FaultSpec],
) -> Result<EpisodeMetrics> {
    Ok(run_episode(
        world,
        genome,
        topology,
        &Telemetry::silent(),
        faults,
    )?)
}
