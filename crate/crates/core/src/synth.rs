//! Deterministic synthetic corpora: single-call seed dialogues over a fixed
//! tool catalog, a noisy supervised corpus for the reference policy, and a
//! held-out benchmark.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augment::{build_triplets, render_value, AugmentConfig, LanguagePack, Triplet};
use crate::corpus::Difficulty;
use crate::policy::{featurize, trajectory_turns, FeatureContext, StateFeatures};
use crate::dialogue::{value_located, ActionKind, JsonMap, Message, ParamSpec, ToolCall, ToolSpec, Trajectory};

#[derive(Debug, Clone, Copy)]
enum Gen {
    Int(i64, i64),
    /// Uniform with two decimals.
    Dec(f64, f64),
    Pick(&'static [&'static str]),
    Date,
    Time,
}

struct ParamDef {
    name: &'static str,
    ty: &'static str,
    description: &'static str,
    /// Sentence stating the value; `{v}` is replaced.
    clause: &'static str,
    gen: Gen,
}

struct ToolDef {
    name: &'static str,
    description: &'static str,
    intro: &'static str,
    required: &'static [ParamDef],
    optional: &'static [ParamDef],
    result_key: &'static str,
    result_label: &'static str,
}

const CITIES: &[&str] = &[
    "Lisbon", "Oslo", "Nairobi", "Toronto", "Seoul", "Lima", "Prague", "Hanoi", "Dublin", "Denver", "Madrid",
    "Osaka", "Cairo", "Quito", "Zurich", "Perth",
];
const LANGUAGES: &[&str] = &["French", "German", "Korean", "Spanish", "Italian", "Japanese", "Portuguese"];
const CURRENCIES: &[&str] = &["USD", "EUR", "KRW", "JPY", "GBP", "CHF", "CAD"];
const PHRASES: &[&str] = &[
    "the garden is full of flowers",
    "we will arrive tomorrow morning",
    "thank you for the lovely dinner",
    "the museum opens at noon",
    "my brother plays the violin",
    "please keep the change",
];
const RESTAURANTS: &[&str] = &["Blue Lantern", "Casa Verde", "The Copper Pot", "Saffron House", "Little Fig"];
const EVENTS: &[&str] = &["Team sync", "Dentist visit", "Project kickoff", "Yoga class", "Budget review"];
const EMAILS: &[&str] = &["mina@example.com", "omar@example.org", "lee@example.net", "ana@example.com"];
const SUBJECTS: &[&str] = &["Quarterly report", "Trip plans", "Invoice reminder", "Weekly update"];
const BODIES: &[&str] = &[
    "The meeting moved to Friday",
    "Please review the attached draft",
    "Lunch is on me next week",
    "The package arrived safely",
];
const SYMBOLS: &[&str] = &["AAPL", "MSFT", "NVDA", "TSLA", "AMZN", "ORCL"];
const INGREDIENTS: &[&str] = &["chickpeas", "salmon", "mushrooms", "tofu", "lentils", "eggplant"];
const CUISINES: &[&str] = &["Thai", "Mexican", "Lebanese", "Indian", "Greek"];
const CAR_CLASSES: &[&str] = &["compact", "midsize", "SUV", "convertible"];
const SERVICE_LEVELS: &[&str] = &["express", "standard", "economy"];
const UNITS: &[&str] = &["metric", "imperial"];

macro_rules! p {
    ($name:literal, $ty:literal, $desc:literal, $clause:literal, $gen:expr) => {
        ParamDef {
            name: $name,
            ty: $ty,
            description: $desc,
            clause: $clause,
            gen: $gen,
        }
    };
}

static CATALOG: &[ToolDef] = &[
    ToolDef {
        name: "get_weather",
        description: "Get the current weather for a city.",
        intro: "Hi, what is the weather like right now?",
        required: &[p!("city", "string", "The city to look up", "I am in {v}.", Gen::Pick(CITIES))],
        optional: &[p!("units", "string", "Unit system", "Use {v} units.", Gen::Pick(UNITS))],
        result_key: "temperature_c",
        result_label: "temperature in Celsius",
    },
    ToolDef {
        name: "get_stock_price",
        description: "Look up the latest price of a stock.",
        intro: "Hello, I want to check a stock price.",
        required: &[p!("symbol", "string", "The ticker symbol", "The ticker is {v}.", Gen::Pick(SYMBOLS))],
        optional: &[],
        result_key: "price",
        result_label: "latest price",
    },
    ToolDef {
        name: "calculate_bmi",
        description: "Calculate the Body Mass Index from weight and height.",
        intro: "Hi, I need to calculate my BMI.",
        required: &[
            p!("weight", "number", "The weight in kilograms", "I weigh {v} kg.", Gen::Int(45, 120)),
            p!("height", "number", "The height in meters", "My height is {v} m.", Gen::Dec(1.45, 2.05)),
        ],
        optional: &[],
        result_key: "bmi",
        result_label: "BMI",
    },
    ToolDef {
        name: "calculate_tip",
        description: "Calculate the tip for a restaurant bill.",
        intro: "Can you help me figure out a tip?",
        required: &[
            p!("bill_amount", "number", "The total bill amount", "The bill comes to {v} dollars.", Gen::Dec(12.0, 240.0)),
            p!("tip_percentage", "number", "The tip percentage", "I want to leave {v} percent.", Gen::Int(10, 25)),
        ],
        optional: &[],
        result_key: "tip_amount",
        result_label: "tip",
    },
    ToolDef {
        name: "search_recipes",
        description: "Search for recipes by ingredient and cuisine.",
        intro: "I am looking for something to cook tonight.",
        required: &[
            p!("ingredient", "string", "The main ingredient", "I have some {v}.", Gen::Pick(INGREDIENTS)),
            p!("cuisine", "string", "The cuisine style", "I feel like {v} food.", Gen::Pick(CUISINES)),
        ],
        optional: &[p!("max_minutes", "integer", "Maximum cooking time", "It should take under {v} minutes.", Gen::Int(15, 90))],
        result_key: "top_recipe",
        result_label: "top recipe",
    },
    ToolDef {
        name: "translate_text",
        description: "Translate text from one language to another.",
        intro: "Hi, could you translate something for me?",
        required: &[
            p!("text", "string", "The text to translate", "The text is \"{v}\".", Gen::Pick(PHRASES)),
            p!("source_language", "string", "The source language", "It is written in {v}.", Gen::Pick(LANGUAGES)),
            p!("target_language", "string", "The target language", "I need it in {v}.", Gen::Pick(LANGUAGES)),
        ],
        optional: &[],
        result_key: "translated_text",
        result_label: "translation",
    },
    ToolDef {
        name: "convert_currency",
        description: "Convert an amount of money between currencies.",
        intro: "I need a currency conversion.",
        required: &[
            p!("amount", "number", "The amount to convert", "The amount is {v}.", Gen::Dec(5.0, 5000.0)),
            p!("from_currency", "string", "The currency to convert from", "It is in {v}.", Gen::Pick(CURRENCIES)),
            p!("to_currency", "string", "The currency to convert to", "Convert it to {v}.", Gen::Pick(CURRENCIES)),
        ],
        optional: &[],
        result_key: "converted_amount",
        result_label: "converted amount",
    },
    ToolDef {
        name: "calculate_loan_payment",
        description: "Calculate the monthly payment of a loan.",
        intro: "Hello, I am planning to take out a loan.",
        required: &[
            p!("principal", "number", "The loan principal", "I want to borrow {v} dollars.", Gen::Int(2000, 400000)),
            p!("annual_rate", "number", "The annual interest rate in percent", "The interest rate is {v} percent.", Gen::Dec(1.5, 11.5)),
            p!("term_years", "integer", "The loan term in years", "The term is {v} years.", Gen::Int(2, 40)),
        ],
        optional: &[],
        result_key: "monthly_payment",
        result_label: "monthly payment",
    },
    ToolDef {
        name: "send_email",
        description: "Send an email to a recipient.",
        intro: "Please send an email for me.",
        required: &[
            p!("recipient", "string", "The recipient address", "Send it to {v}.", Gen::Pick(EMAILS)),
            p!("subject", "string", "The subject line", "The subject is \"{v}\".", Gen::Pick(SUBJECTS)),
            p!("body", "string", "The message body", "The message says \"{v}\".", Gen::Pick(BODIES)),
        ],
        optional: &[],
        result_key: "message_id",
        result_label: "message id",
    },
    ToolDef {
        name: "set_reminder",
        description: "Set a reminder at a given date and time.",
        intro: "Can you set a reminder?",
        required: &[
            p!("message", "string", "The reminder text", "Remind me about the \"{v}\".", Gen::Pick(EVENTS)),
            p!("date", "string", "The reminder date", "It is on {v}.", Gen::Date),
            p!("time", "string", "The reminder time", "Make it {v}.", Gen::Time),
        ],
        optional: &[],
        result_key: "reminder_id",
        result_label: "reminder id",
    },
    ToolDef {
        name: "calculate_shipping",
        description: "Estimate the shipping cost of a parcel.",
        intro: "I want to ship a parcel.",
        required: &[
            p!("weight_kg", "number", "The parcel weight in kilograms", "The parcel weighs {v} kg.", Gen::Dec(0.2, 30.0)),
            p!("destination", "string", "The destination city", "It goes to {v}.", Gen::Pick(CITIES)),
            p!("service_level", "string", "The shipping service level", "Use {v} shipping.", Gen::Pick(SERVICE_LEVELS)),
        ],
        optional: &[],
        result_key: "cost",
        result_label: "shipping cost",
    },
    ToolDef {
        name: "book_flight",
        description: "Book a flight between two cities.",
        intro: "Hi, I would like to book a flight.",
        required: &[
            p!("origin", "string", "The departure city", "I am leaving from {v}.", Gen::Pick(CITIES)),
            p!("destination", "string", "The arrival city", "I am flying to {v}.", Gen::Pick(CITIES)),
            p!("date", "string", "The travel date", "I want to travel on {v}.", Gen::Date),
            p!("passengers", "integer", "The number of passengers", "There will be {v} passengers.", Gen::Int(1, 9)),
        ],
        optional: &[],
        result_key: "booking_code",
        result_label: "booking code",
    },
    ToolDef {
        name: "reserve_table",
        description: "Reserve a table at a restaurant.",
        intro: "I would like to make a dinner reservation.",
        required: &[
            p!("restaurant", "string", "The restaurant name", "The place is called {v}.", Gen::Pick(RESTAURANTS)),
            p!("date", "string", "The reservation date", "It is for {v}.", Gen::Date),
            p!("time", "string", "The reservation time", "We will come at {v}.", Gen::Time),
            p!("party_size", "integer", "The number of guests", "We are a party of {v}.", Gen::Int(2, 12)),
        ],
        optional: &[],
        result_key: "confirmation",
        result_label: "confirmation number",
    },
    ToolDef {
        name: "create_event",
        description: "Create an event in the calendar.",
        intro: "Please add something to my calendar.",
        required: &[
            p!("title", "string", "The event title", "Call it \"{v}\".", Gen::Pick(EVENTS)),
            p!("date", "string", "The event date", "Put it on {v}.", Gen::Date),
            p!("time", "string", "The start time", "It starts at {v}.", Gen::Time),
            p!("duration_minutes", "integer", "The duration in minutes", "It lasts {v} minutes.", Gen::Int(15, 180)),
        ],
        optional: &[p!("location", "string", "Where it happens", "It is in {v}.", Gen::Pick(CITIES))],
        result_key: "event_id",
        result_label: "event id",
    },
    ToolDef {
        name: "book_hotel",
        description: "Book a hotel room.",
        intro: "I need a hotel room.",
        required: &[
            p!("city", "string", "The city of the hotel", "I will be staying in {v}.", Gen::Pick(CITIES)),
            p!("check_in", "string", "The check-in date", "I check in on {v}.", Gen::Date),
            p!("check_out", "string", "The check-out date", "I check out on {v}.", Gen::Date),
            p!("guests", "integer", "The number of guests", "It is for {v} guests.", Gen::Int(1, 6)),
        ],
        optional: &[],
        result_key: "reservation_id",
        result_label: "reservation id",
    },
    ToolDef {
        name: "rent_car",
        description: "Rent a car for a trip.",
        intro: "Hello, I need to rent a car.",
        required: &[
            p!("city", "string", "The pickup city", "I will pick it up in {v}.", Gen::Pick(CITIES)),
            p!("pickup_date", "string", "The pickup date", "Pickup is on {v}.", Gen::Date),
            p!("return_date", "string", "The return date", "I return it on {v}.", Gen::Date),
            p!("car_class", "string", "The car class", "I would like a {v} car.", Gen::Pick(CAR_CLASSES)),
            p!("driver_age", "integer", "The age of the driver", "The driver is {v} years old.", Gen::Int(21, 80)),
        ],
        optional: &[],
        result_key: "rental_id",
        result_label: "rental id",
    },
];

fn gen_value(gen: Gen, rng: &mut ChaCha8Rng) -> Value {
    match gen {
        Gen::Int(lo, hi) => json!(rng.gen_range(lo..=hi)),
        Gen::Dec(lo, hi) => {
            let cents = rng.gen_range((lo * 100.0) as i64..=(hi * 100.0) as i64);
            if cents % 100 == 0 {
                json!(cents / 100)
            } else {
                json!(cents as f64 / 100.0)
            }
        }
        Gen::Pick(items) => json!(items.choose(rng).expect("non-empty pool")),
        Gen::Date => json!(format!(
            "2026-{:02}-{:02}",
            rng.gen_range(1..=12),
            rng.gen_range(1..=28)
        )),
        Gen::Time => json!(format!("{:02}:{:02}", rng.gen_range(7..=22), [0, 15, 30, 45][rng.gen_range(0..4)])),
    }
}

fn spec_of(def: &ToolDef) -> ToolSpec {
    let mut spec = ToolSpec::new(def.name, def.description);
    for p in def.required {
        spec = spec.with_param(p.name, ParamSpec::new(p.ty, p.description), true);
    }
    for p in def.optional {
        spec = spec.with_param(p.name, ParamSpec::new(p.ty, p.description), false);
    }
    spec
}

/// Every catalog tool as a spec.
pub fn tool_catalog() -> Vec<ToolSpec> {
    CATALOG.iter().map(spec_of).collect()
}

fn rng_for(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 40) | index as u64);
    rng
}

/// Each value sits in its own clause and nowhere else in the query.
fn clean(intro: &str, clauses: &[String], values: &[&Value]) -> bool {
    values.iter().enumerate().all(|(i, v)| {
        !value_located(v, intro)
            && clauses
                .iter()
                .enumerate()
                .all(|(j, c)| value_located(v, c) == (i == j))
    })
}

fn one_seed(def: &ToolDef, id: String, rng: &mut ChaCha8Rng) -> Trajectory {
    let (clauses, args) = loop {
        let mut args = JsonMap::new();
        let mut clauses = Vec::new();
        for p in def.required {
            let v = gen_value(p.gen, rng);
            clauses.push(p.clause.replace("{v}", &render_value(&v)));
            args.insert(p.name.to_string(), v);
        }
        let values: Vec<&Value> = def.required.iter().map(|p| &args[p.name]).collect();
        if clean(def.intro, &clauses, &values) {
            break (clauses, args);
        }
    };
    let mut order: Vec<usize> = (0..clauses.len()).collect();
    order.shuffle(rng);
    let query = std::iter::once(def.intro.to_string())
        .chain(order.iter().map(|&i| clauses[i].clone()))
        .collect::<Vec<_>>()
        .join(" ");

    let result = json!(format!("{}-{}", &def.result_key[..2].to_uppercase(), rng.gen_range(10000..99999)));
    let mut tools = vec![spec_of(def)];
    let n_distractors = rng.gen_range(0..=2);
    while tools.len() < 1 + n_distractors {
        let other = CATALOG.choose(rng).expect("catalog");
        if tools.iter().all(|t| t.name != other.name) {
            tools.push(spec_of(other));
        }
    }
    tools.shuffle(rng);

    let mut traj = Trajectory::new(
        vec![
            Message::user(query),
            Message::assistant_call("Sure, let me take care of that.", ToolCall::new(def.name, &args)),
            Message::tool(def.name, json!({ def.result_key: result }).to_string()),
            Message::assistant(format!("All done. The {} is {}.", def.result_label, render_value(&result))),
        ],
        tools,
    );
    traj.extra.insert("id".into(), json!(id));
    traj
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedCorpusConfig {
    pub seed: u64,
    /// Seeds on tools with one or two required fields.
    pub n_easy: usize,
    /// Seeds on tools with three or more required fields.
    pub n_hard: usize,
}

impl Default for SeedCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_easy: 2200,
            n_hard: 2640,
        }
    }
}

const KIND_SEEDS: u64 = 1;
const KIND_SFT: u64 = 2;
const KIND_BENCH: u64 = 3;
const KIND_CHAT: u64 = 4;

fn seeds_of(cfg: &SeedCorpusConfig, kind: u64, prefix: &str) -> Vec<Trajectory> {
    let easy: Vec<&ToolDef> = CATALOG.iter().filter(|d| d.required.len() < 3).collect();
    let hard: Vec<&ToolDef> = CATALOG.iter().filter(|d| d.required.len() >= 3).collect();
    (0..cfg.n_easy + cfg.n_hard)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(cfg.seed, kind, i);
            let pool = if i < cfg.n_easy { &easy } else { &hard };
            let def = pool[rng.gen_range(0..pool.len())];
            one_seed(def, format!("{prefix}{i:05}"), &mut rng)
        })
        .collect()
}

/// Type 1 seed dialogues: Easy-tool seeds first, then Hard-tool seeds.
pub fn seed_corpus(cfg: &SeedCorpusConfig) -> Vec<Trajectory> {
    seeds_of(cfg, KIND_SEEDS, "seed-")
}

/// How often the supervised corpus shows the wrong behavior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftNoise {
    /// Calls made although exactly one required value is missing.
    pub hallucinate_one_missing: f64,
    /// Calls made although two or more required values are missing.
    pub hallucinate_many_missing: f64,
    /// Calls to a tool that is not in the list.
    pub call_unlisted_tool: f64,
}

impl Default for SftNoise {
    fn default() -> Self {
        Self {
            hallucinate_one_missing: 0.7,
            hallucinate_many_missing: 0.3,
            call_unlisted_tool: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftCorpusConfig {
    pub seeds: SeedCorpusConfig,
    pub noise: SftNoise,
}

impl Default for SftCorpusConfig {
    fn default() -> Self {
        Self {
            seeds: SeedCorpusConfig {
                seed: 42,
                n_easy: 600,
                n_hard: 600,
            },
            noise: SftNoise::default(),
        }
    }
}

fn triplets_of(seeds: &[Trajectory], seed: u64) -> Vec<Triplet> {
    let cfg = AugmentConfig {
        seed,
        ..AugmentConfig::default()
    };
    build_triplets(seeds, &cfg, &LanguagePack::default(), None).0
}

/// Supervised corpus in the style of public single-call data: every seed
/// yields a Type 1 dialogue, an incomplete-query dialogue and an
/// out-of-tools dialogue, each of the last two answered wrongly at the
/// configured rates.
pub fn sft_corpus(cfg: &SftCorpusConfig) -> Vec<Trajectory> {
    let seeds = seeds_of(&cfg.seeds, KIND_SFT, "sft-");
    let triplets = triplets_of(&seeds, cfg.seeds.seed);
    let noise = cfg.noise;
    triplets
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let mut rng = rng_for(cfg.seeds.seed, KIND_SFT + 100, i);
            let rate = if t.n_exchanges <= 1 && t.difficulty == Difficulty::Easy {
                noise.hallucinate_one_missing
            } else {
                noise.hallucinate_many_missing
            };
            let t2 = if rng.gen::<f64>() < rate {
                let mut messages = vec![t.t2.messages[0].clone()];
                messages.extend(t.t1.messages[1..].iter().cloned());
                Trajectory::new(messages, t.t2.tools.clone())
            } else {
                t.t2.clone()
            };
            let t3 = if rng.gen::<f64>() < noise.call_unlisted_tool {
                Trajectory::new(t.t1.messages.clone(), t.t3_from_t1.tools.clone())
            } else {
                t.t3_from_t1.clone()
            };
            [t.t1.clone(), t2, t3]
        })
        .collect()
}

/// Behavior of a general chat model that has never seen tool calls: it
/// answers every request directly in plain text, and when a tool result
/// is already in the context it summarizes it. Features come from the
/// underlying seed dialogues, so the turns land on the same keys as
/// tool-use data.
pub fn chat_examples(cfg: &SeedCorpusConfig) -> Vec<(StateFeatures, ActionKind)> {
    let seeds = seeds_of(cfg, KIND_CHAT, "chat-");
    let mut out = Vec::new();
    for t in triplets_of(&seeds, cfg.seed) {
        for traj in [&t.t1, &t.t2, &t.t3_from_t1] {
            let ctx = FeatureContext::of_pair(traj, &t.t1);
            let prefix = Trajectory::new(traj.messages[..1].to_vec(), traj.tools.clone());
            if let Ok(f) = featurize(&prefix, &ctx) {
                out.push((f, ActionKind::Reject));
            }
        }
        if let Ok(turns) = trajectory_turns(&t.t1, &FeatureContext::of(&t.t1)) {
            out.extend(turns.into_iter().filter(|(_, a)| *a == ActionKind::Complete));
        }
    }
    out
}

/// Held-out evaluation dialogues on fresh seeds: each seed contributes its
/// Type 1, Type 2 and Type 3 forms.
pub fn benchmark(cfg: &SeedCorpusConfig) -> Vec<Trajectory> {
    let seeds = seeds_of(cfg, KIND_BENCH, "bench-");
    triplets_of(&seeds, cfg.seed)
        .into_iter()
        .flat_map(|t| [t.t1, t.t2, t.t3_from_t1])
        .collect()
}

pub fn default_benchmark_config() -> SeedCorpusConfig {
    SeedCorpusConfig {
        seed: 42,
        n_easy: 150,
        n_hard: 150,
    }
}
