//! Domain records, long-format CSV ingestion and the calendar bookkeeping
//! (workshop indicators, elapsed days, calendar periods) derived from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_STAKEHOLDERS: usize = 5;
pub const N_WORKSHOPS: usize = 5;
pub const N_TIMES: u8 = 10;
pub const N_CATEGORIES: usize = 11;
pub const N_THRESHOLDS: usize = N_CATEGORIES - 1;

/// Level assigned to empty or unrecognised demographic cells.
pub const MISSING_LEVEL: &str = "missing";

const MISSING_TOKENS: [&str; 6] = ["na", "n/a", "nan", "null", "none", "?"];

pub const RATINGS_HEADER: [&str; 6] = [
    "individual_id",
    "wave",
    "time_index",
    "stakeholder",
    "rating",
    "date",
];
pub const SCHEDULE_HEADER: [&str; 3] = ["wave", "workshop", "date"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stakeholder {
    Government,
    Supermarkets,
    FoodIndustry,
    Farmers,
    Individuals,
}

impl Stakeholder {
    pub const ALL: [Stakeholder; N_STAKEHOLDERS] = [
        Stakeholder::Government,
        Stakeholder::Supermarkets,
        Stakeholder::FoodIndustry,
        Stakeholder::Farmers,
        Stakeholder::Individuals,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Label used in files and parameter names.
    pub fn label(self) -> &'static str {
        match self {
            Stakeholder::Government => "government",
            Stakeholder::Supermarkets => "supermarkets",
            Stakeholder::FoodIndustry => "food_industry",
            Stakeholder::Farmers => "farmers",
            Stakeholder::Individuals => "individuals",
        }
    }

    /// Heading used in human-readable tables.
    pub fn title(self) -> &'static str {
        match self {
            Stakeholder::Government => "Government",
            Stakeholder::Supermarkets => "Supermarkets",
            Stakeholder::FoodIndustry => "The Food Industry",
            Stakeholder::Farmers => "Farmers",
            Stakeholder::Individuals => "Individuals",
        }
    }
}

impl fmt::Display for Stakeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Stakeholder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.label() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown stakeholder `{s}`")))
    }
}

/// Day number (days since 0001-01-01, proleptic Gregorian).
pub type Day = i64;

pub fn day_from_date(date: NaiveDate) -> Day {
    i64::from(date.num_days_from_ce())
}

pub fn date_from_day(day: Day) -> NaiveDate {
    NaiveDate::from_num_days_from_ce_opt(day as i32).expect("day number within chrono range")
}

pub fn parse_date(text: &str) -> Result<Day> {
    NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
        .map(day_from_date)
        .map_err(|e| Error::invalid(format!("`{text}` is not an ISO-8601 date: {e}")))
}

pub fn format_day(day: Day) -> String {
    date_from_day(day).format("%Y-%m-%d").to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingObservation {
    pub individual_id: String,
    pub wave: u32,
    /// 1..=10; odd indices open a workshop, even indices close it.
    pub time_index: u8,
    pub stakeholder: Stakeholder,
    /// 0..=10.
    pub rating: u8,
    pub day: Day,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub individual_id: String,
    pub wave: u32,
    /// Covariate name to level; every covariate of the dataset is present.
    pub covariates: BTreeMap<String, String>,
}

/// Workshop of a time index (1-based): t = 2w-1 opens workshop w and t = 2w closes it.
pub fn workshop_of(time_index: u8) -> usize {
    (usize::from(time_index) + 1) / 2
}

/// Number of workshops completed by time index `t`.
pub fn workshops_occurred(time_index: u8) -> usize {
    usize::from(time_index) / 2
}

fn check_time_index(time_index: u8) -> Result<()> {
    if (1..=N_TIMES).contains(&time_index) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "time index {time_index} outside 1..={N_TIMES}"
        )))
    }
}

/// Indicators of which workshops have occurred at time index `t`.
pub fn workshop_indicators(time_index: u8) -> Result<[u8; N_WORKSHOPS]> {
    check_time_index(time_index)?;
    let done = workshops_occurred(time_index);
    let mut out = [0u8; N_WORKSHOPS];
    out.iter_mut().take(done).for_each(|x| *x = 1);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveSchedule {
    dates: BTreeMap<u32, [Day; N_WORKSHOPS]>,
    horizon: u32,
}

impl WaveSchedule {
    /// Builds a schedule; the horizon defaults to the largest gap between consecutive workshops.
    pub fn new(dates: BTreeMap<u32, [Day; N_WORKSHOPS]>) -> Result<Self> {
        if dates.is_empty() {
            return Err(Error::invalid("schedule has no waves"));
        }
        for (wave, days) in &dates {
            if days.windows(2).any(|p| p[1] <= p[0]) {
                return Err(Error::invalid(format!(
                    "workshop dates of wave {wave} are not strictly increasing"
                )));
            }
        }
        let horizon = dates
            .values()
            .flat_map(|d| d.windows(2).map(|p| p[1] - p[0]))
            .max()
            .unwrap_or(1)
            .max(1) as u32;
        Ok(Self { dates, horizon })
    }

    pub fn with_horizon(mut self, horizon: u32) -> Result<Self> {
        let gap = self.max_gap();
        if horizon == 0 || i64::from(horizon) < gap {
            return Err(Error::invalid(format!(
                "horizon {horizon} must be positive and at least the largest workshop gap ({gap} days)"
            )));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn max_gap(&self) -> i64 {
        self.dates
            .values()
            .flat_map(|d| d.windows(2).map(|p| p[1] - p[0]))
            .max()
            .unwrap_or(0)
    }

    /// Horizon D in days.
    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn waves(&self) -> Vec<u32> {
        self.dates.keys().copied().collect()
    }

    pub fn wave_dates(&self, wave: u32) -> Option<&[Day; N_WORKSHOPS]> {
        self.dates.get(&wave)
    }

    pub fn contains(&self, wave: u32) -> bool {
        self.dates.contains_key(&wave)
    }

    /// Scheduled measurement day for `(wave, t)`.
    pub fn measurement_day(&self, wave: u32, time_index: u8) -> Result<Day> {
        check_time_index(time_index)?;
        let dates = self
            .dates
            .get(&wave)
            .ok_or_else(|| Error::invalid(format!("wave {wave} is not in the schedule")))?;
        Ok(dates[workshop_of(time_index) - 1])
    }
}

/// Days between workshop `workshop` (1-based) and the measurement at `t` in `wave`.
pub fn elapsed_days(schedule: &WaveSchedule, wave: u32, workshop: usize, time_index: u8) -> Result<i64> {
    check_time_index(time_index)?;
    if workshop == 0 || workshop > N_WORKSHOPS {
        return Err(Error::invalid(format!("workshop {workshop} outside 1..=5")));
    }
    if workshop > workshops_occurred(time_index) {
        return Err(Error::WorkshopNotOccurred {
            workshop,
            time_index,
        });
    }
    let dates = schedule
        .wave_dates(wave)
        .ok_or_else(|| Error::invalid(format!("wave {wave} is not in the schedule")))?;
    Ok(schedule.measurement_day(wave, time_index)? - dates[workshop - 1])
}

/// How measurement dates are grouped into calendar periods.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarBinning {
    #[default]
    Month,
    None,
    /// Each listed ISO date opens a new period.
    Breaks(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalendarMap {
    starts: Vec<Day>,
    labels: Vec<String>,
}

impl CalendarMap {
    pub fn build(binning: &CalendarBinning, days: impl IntoIterator<Item = Day>) -> Result<Self> {
        let days: BTreeSet<Day> = days.into_iter().collect();
        let first = days.first().copied().unwrap_or(0);
        match binning {
            CalendarBinning::None => Ok(Self {
                starts: vec![Day::MIN],
                labels: vec!["all".into()],
            }),
            CalendarBinning::Month => {
                let months: BTreeSet<(i32, u32)> = days
                    .iter()
                    .map(|d| {
                        let date = date_from_day(*d);
                        (date.year(), date.month())
                    })
                    .collect();
                let mut starts = Vec::new();
                let mut labels = Vec::new();
                for (i, (y, m)) in months.into_iter().enumerate() {
                    let start = day_from_date(NaiveDate::from_ymd_opt(y, m, 1).expect("valid month"));
                    starts.push(if i == 0 { Day::MIN } else { start });
                    labels.push(format!("{y:04}-{m:02}"));
                }
                if starts.is_empty() {
                    starts.push(Day::MIN);
                    labels.push("all".into());
                }
                Ok(Self { starts, labels })
            }
            CalendarBinning::Breaks(breaks) => {
                let mut cuts = breaks.iter().map(|b| parse_date(b)).collect::<Result<Vec<_>>>()?;
                cuts.sort_unstable();
                cuts.dedup();
                let mut starts = vec![Day::MIN];
                let mut labels = vec![format!("from {}", format_day(first))];
                for c in cuts {
                    starts.push(c);
                    labels.push(format!("from {}", format_day(c)));
                }
                Ok(Self { starts, labels })
            }
        }
    }

    /// Number of calendar periods p.
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Zero-based period of a day.
    pub fn period_of(&self, day: Day) -> usize {
        self.starts.partition_point(|s| *s <= day).saturating_sub(1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadWarnings {
    /// Demographic cells holding a missing-value token other than an empty cell.
    pub missing_tokens: usize,
    /// Observations whose date differs from the scheduled workshop date.
    pub date_mismatches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub individuals: Vec<IndividualRecord>,
    pub observations: Vec<RatingObservation>,
    pub schedule: WaveSchedule,
    pub calendar: CalendarMap,
    pub covariate_names: Vec<String>,
    /// Individuals lacking a beginning or end measurement of some workshop they attended.
    pub incomplete: Vec<String>,
    pub warnings: LoadWarnings,
}

impl Dataset {
    /// Validates records and derives the incomplete-individual flags and the monthly calendar.
    pub fn new(
        individuals: Vec<IndividualRecord>,
        observations: Vec<RatingObservation>,
        schedule: WaveSchedule,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let mut waves: HashMap<&str, u32> = HashMap::with_capacity(individuals.len());
        for rec in &individuals {
            if !schedule.contains(rec.wave) {
                return Err(Error::invalid(format!(
                    "individual {} belongs to wave {} which is not in the schedule",
                    rec.individual_id, rec.wave
                )));
            }
            if waves.insert(rec.individual_id.as_str(), rec.wave).is_some() {
                return Err(Error::invalid(format!(
                    "individual {} listed twice",
                    rec.individual_id
                )));
            }
            for name in &covariate_names {
                if !rec.covariates.contains_key(name) {
                    return Err(Error::invalid(format!(
                        "individual {} has no value for covariate {name}",
                        rec.individual_id
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        let mut date_mismatches = 0;
        for (row, obs) in observations.iter().enumerate() {
            validate_observation(obs).map_err(|m| Error::row("ratings", row + 1, m))?;
            match waves.get(obs.individual_id.as_str()) {
                None => {
                    return Err(Error::row(
                        "ratings",
                        row + 1,
                        format!("individual {} has no individual record", obs.individual_id),
                    ))
                }
                Some(w) if *w != obs.wave => {
                    return Err(Error::row(
                        "ratings",
                        row + 1,
                        format!(
                            "wave {} disagrees with the individual record (wave {w})",
                            obs.wave
                        ),
                    ))
                }
                _ => {}
            }
            let scheduled = schedule
                .measurement_day(obs.wave, obs.time_index)
                .map_err(|e| Error::row("ratings", row + 1, e.to_string()))?;
            if scheduled != obs.day {
                date_mismatches += 1;
            }
            if !seen.insert((obs.individual_id.as_str(), obs.stakeholder, obs.time_index)) {
                return Err(Error::row(
                    "ratings",
                    row + 1,
                    format!(
                        "duplicate observation for ({}, {}, t={})",
                        obs.individual_id, obs.stakeholder, obs.time_index
                    ),
                ));
            }
        }
        let calendar =
            CalendarMap::build(&CalendarBinning::Month, observations.iter().map(|o| o.day))?;
        let incomplete = flag_incomplete(&individuals, &observations);
        Ok(Self {
            individuals,
            observations,
            schedule,
            calendar,
            covariate_names,
            incomplete,
            warnings: LoadWarnings {
                missing_tokens: 0,
                date_mismatches,
            },
        })
    }

    pub fn individual_count(&self) -> usize {
        self.individuals.len()
    }

    pub fn waves(&self) -> Vec<u32> {
        self.schedule.waves()
    }

    /// Copy without the individuals flagged as incomplete.
    pub fn complete_only(&self) -> Self {
        let drop: BTreeSet<&str> = self.incomplete.iter().map(String::as_str).collect();
        let mut out = self.clone();
        out.individuals.retain(|r| !drop.contains(r.individual_id.as_str()));
        out.observations.retain(|o| !drop.contains(o.individual_id.as_str()));
        out.incomplete.clear();
        out
    }

    pub fn with_calendar(mut self, binning: &CalendarBinning) -> Result<Self> {
        self.calendar = CalendarMap::build(binning, self.observations.iter().map(|o| o.day))?;
        Ok(self)
    }
}

fn validate_observation(obs: &RatingObservation) -> std::result::Result<(), String> {
    if obs.rating > 10 {
        return Err(format!("rating {} outside 0..=10", obs.rating));
    }
    if !(1..=N_TIMES).contains(&obs.time_index) {
        return Err(format!("time index {} outside 1..=10", obs.time_index));
    }
    Ok(())
}

fn flag_incomplete(individuals: &[IndividualRecord], observations: &[RatingObservation]) -> Vec<String> {
    let mut present: HashMap<&str, [bool; N_TIMES as usize]> = HashMap::new();
    for obs in observations {
        present.entry(obs.individual_id.as_str()).or_default()[usize::from(obs.time_index) - 1] = true;
    }
    individuals
        .iter()
        .filter(|rec| {
            let times = present.get(rec.individual_id.as_str()).copied().unwrap_or_default();
            (0..N_WORKSHOPS).any(|w| times[2 * w] != times[2 * w + 1])
        })
        .map(|rec| rec.individual_id.clone())
        .collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn check_header(path: &Path, found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.len() < expected.len() || found.iter().zip(expected).any(|(a, b)| a != *b) {
        return Err(Error::Header {
            file: file_label(path),
            expected: expected.join(", "),
            found: found.iter().collect::<Vec<_>>().join(", "),
        });
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::row(&file_label(path), row, format!("{other:?}")),
    }
}

fn parse_int<T: FromStr>(text: &str, what: &str) -> std::result::Result<T, String> {
    text.trim()
        .parse::<T>()
        .map_err(|_| format!("{what} `{text}` is not an integer"))
}

pub fn read_schedule(path: &Path) -> Result<WaveSchedule> {
    let mut reader = open_csv(path)?;
    let label = file_label(path);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &SCHEDULE_HEADER)?;
    let mut partial: BTreeMap<u32, [Option<Day>; N_WORKSHOPS]> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let wave: u32 = parse_int(&rec[0], "wave").map_err(|m| Error::row(&label, line, m))?;
        let workshop: usize = parse_int(&rec[1], "workshop").map_err(|m| Error::row(&label, line, m))?;
        if !(1..=N_WORKSHOPS).contains(&workshop) {
            return Err(Error::row(&label, line, format!("workshop {workshop} outside 1..=5")));
        }
        let day = parse_date(&rec[2]).map_err(|e| Error::row(&label, line, e.to_string()))?;
        let slot = &mut partial.entry(wave).or_default()[workshop - 1];
        if slot.replace(day).is_some() {
            return Err(Error::row(
                &label,
                line,
                format!("workshop {workshop} of wave {wave} listed twice"),
            ));
        }
    }
    let mut dates = BTreeMap::new();
    for (wave, slots) in partial {
        let mut days = [0; N_WORKSHOPS];
        for (w, slot) in slots.iter().enumerate() {
            days[w] = slot.ok_or_else(|| {
                Error::invalid(format!("{label}: wave {wave} has no date for workshop {}", w + 1))
            })?;
        }
        dates.insert(wave, days);
    }
    WaveSchedule::new(dates)
}

fn normalise_level(cell: &str, tokens: &mut usize) -> String {
    let cell = cell.trim();
    if cell.is_empty() {
        MISSING_LEVEL.to_string()
    } else if MISSING_TOKENS.contains(&cell.to_ascii_lowercase().as_str()) {
        *tokens += 1;
        MISSING_LEVEL.to_string()
    } else {
        cell.to_string()
    }
}

pub fn read_individuals(path: &Path) -> Result<(Vec<IndividualRecord>, Vec<String>, usize)> {
    let mut reader = open_csv(path)?;
    let label = file_label(path);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &["individual_id", "wave"])?;
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut tokens = 0;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let individual_id = rec[0].to_string();
        if individual_id.is_empty() {
            return Err(Error::row(&label, line, "empty individual_id"));
        }
        let wave = parse_int(&rec[1], "wave").map_err(|m| Error::row(&label, line, m))?;
        let covariates = names
            .iter()
            .enumerate()
            .map(|(k, name)| (name.clone(), normalise_level(rec.get(k + 2).unwrap_or(""), &mut tokens)))
            .collect();
        out.push(IndividualRecord {
            individual_id,
            wave,
            covariates,
        });
    }
    Ok((out, names, tokens))
}

pub fn read_ratings(path: &Path) -> Result<Vec<RatingObservation>> {
    let mut reader = open_csv(path)?;
    let label = file_label(path);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &RATINGS_HEADER)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let err = |m: String| Error::row(&label, line, m);
        let wave = parse_int(&rec[1], "wave").map_err(err)?;
        let time_index: u8 = parse_int(&rec[2], "time index").map_err(err)?;
        if !(1..=N_TIMES).contains(&time_index) {
            return Err(err(format!("time index {time_index} outside 1..=10")));
        }
        let stakeholder: Stakeholder = rec[3].parse().map_err(|e: Error| err(e.to_string()))?;
        let rating: i64 = parse_int(&rec[4], "rating").map_err(err)?;
        if !(0..=10).contains(&rating) {
            return Err(err(format!("rating {rating} outside 0..=10")));
        }
        let day = parse_date(&rec[5]).map_err(|e| err(e.to_string()))?;
        out.push(RatingObservation {
            individual_id: rec[0].to_string(),
            wave,
            time_index,
            stakeholder,
            rating: rating as u8,
            day,
        });
    }
    Ok(out)
}

/// Reads and validates the three long-format input files.
pub fn load_dataset(ratings: &Path, individuals: &Path, schedule: &Path) -> Result<Dataset> {
    let schedule = read_schedule(schedule)?;
    let (records, names, tokens) = read_individuals(individuals)?;
    let observations = read_ratings(ratings)?;
    let label = file_label(ratings);
    let mut dataset = Dataset::new(records, observations, schedule, names).map_err(|e| match e {
        // Row numbers from `Dataset::new` count data rows; the file has a header line.
        Error::Row { row, message, .. } => Error::row(&label, row + 1, message),
        other => other,
    })?;
    dataset.warnings.missing_tokens = tokens;
    if tokens > 0 {
        log::warn!("{tokens} demographic cells mapped to the `{MISSING_LEVEL}` level");
    }
    if !dataset.incomplete.is_empty() {
        log::warn!(
            "{} individuals lack a beginning or end measurement for an attended workshop",
            dataset.incomplete.len()
        );
    }
    Ok(dataset)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes `ratings.csv`, `individuals.csv` and `schedule.csv` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: std::io::Error| Error::io(p.clone(), e)
    };

    let path = dir.join("ratings.csv");
    let mut out = create(&path)?;
    writeln!(out, "{}", RATINGS_HEADER.join(",")).map_err(io(&path))?;
    for o in &dataset.observations {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            o.individual_id,
            o.wave,
            o.time_index,
            o.stakeholder,
            o.rating,
            format_day(o.day)
        )
        .map_err(io(&path))?;
    }
    out.flush().map_err(io(&path))?;

    let path = dir.join("individuals.csv");
    let mut out = create(&path)?;
    let mut header = vec!["individual_id".to_string(), "wave".to_string()];
    header.extend(dataset.covariate_names.iter().cloned());
    writeln!(out, "{}", header.join(",")).map_err(io(&path))?;
    for r in &dataset.individuals {
        let mut cells = vec![r.individual_id.clone(), r.wave.to_string()];
        for name in &dataset.covariate_names {
            let level = &r.covariates[name];
            cells.push(if level == MISSING_LEVEL { String::new() } else { level.clone() });
        }
        writeln!(out, "{}", cells.join(",")).map_err(io(&path))?;
    }
    out.flush().map_err(io(&path))?;

    let path = dir.join("schedule.csv");
    let mut out = create(&path)?;
    writeln!(out, "{}", SCHEDULE_HEADER.join(",")).map_err(io(&path))?;
    for wave in dataset.schedule.waves() {
        let dates = dataset.schedule.wave_dates(wave).expect("listed wave");
        for (w, d) in dates.iter().enumerate() {
            writeln!(out, "{wave},{},{}", w + 1, format_day(*d)).map_err(io(&path))?;
        }
    }
    out.flush().map_err(io(&path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(gaps: &[i64]) -> WaveSchedule {
        let mut days = [0; N_WORKSHOPS];
        let start = parse_date("2023-01-09").unwrap();
        days[0] = start;
        for w in 1..N_WORKSHOPS {
            days[w] = days[w - 1] + gaps[(w - 1) % gaps.len()];
        }
        WaveSchedule::new(BTreeMap::from([(1, days)])).unwrap()
    }

    #[test]
    fn indicators_follow_end_measurements() {
        assert_eq!(workshop_indicators(5).unwrap(), [1, 1, 0, 0, 0]);
        assert_eq!(workshop_indicators(1).unwrap(), [0; 5]);
        assert_eq!(workshop_indicators(10).unwrap(), [1; 5]);
        assert!(workshop_indicators(0).is_err());
        assert!(workshop_indicators(11).is_err());
    }

    #[test]
    fn indicators_are_monotone() {
        for t in 2..=N_TIMES {
            let prev = workshop_indicators(t - 1).unwrap();
            let cur = workshop_indicators(t).unwrap();
            assert!(cur.iter().zip(prev).all(|(c, p)| *c >= p));
        }
    }

    #[test]
    fn elapsed_days_cases() {
        let s = schedule(&[14]);
        for w in 1..=N_WORKSHOPS {
            assert_eq!(elapsed_days(&s, 1, w, (2 * w) as u8).unwrap(), 0);
        }
        assert_eq!(elapsed_days(&s, 1, 1, 3).unwrap(), 14);
        // two sessions back, at the later beginning measurement
        assert_eq!(elapsed_days(&s, 1, 1, 5).unwrap(), 28);
        assert!(matches!(
            elapsed_days(&s, 1, 3, 5),
            Err(Error::WorkshopNotOccurred { workshop: 3, time_index: 5 })
        ));
    }

    #[test]
    fn elapsed_days_nondecreasing_in_t() {
        let s = schedule(&[7, 12, 17, 10]);
        for w in 1..=N_WORKSHOPS {
            let mut last = -1;
            for t in (2 * w as u8)..=N_TIMES {
                let d = elapsed_days(&s, 1, w, t).unwrap();
                assert!(d >= 0 && d >= last);
                last = d;
            }
        }
    }

    #[test]
    fn horizon_defaults_to_max_gap_and_rejects_smaller_override() {
        let s = schedule(&[7, 12, 17, 10]);
        assert_eq!(s.horizon(), 17);
        assert!(s.clone().with_horizon(16).is_err());
        assert_eq!(s.with_horizon(20).unwrap().horizon(), 20);
    }

    #[test]
    fn schedule_rejects_unordered_dates() {
        let dates = BTreeMap::from([(1, [0, 5, 5, 9, 12])]);
        assert!(WaveSchedule::new(dates).is_err());
    }

    #[test]
    fn monthly_calendar_periods() {
        let days = ["2023-01-09", "2023-01-30", "2023-02-13", "2023-04-02"].map(|d| parse_date(d).unwrap());
        let cal = CalendarMap::build(&CalendarBinning::Month, days).unwrap();
        assert_eq!(cal.len(), 3);
        assert_eq!(cal.period_of(days[0]), 0);
        assert_eq!(cal.period_of(days[1]), 0);
        assert_eq!(cal.period_of(days[2]), 1);
        assert_eq!(cal.period_of(days[3]), 2);
        let none = CalendarMap::build(&CalendarBinning::None, days).unwrap();
        assert_eq!(none.len(), 1);
    }

    #[test]
    fn incomplete_flag_when_beginning_missing() {
        let rec = IndividualRecord {
            individual_id: "A".into(),
            wave: 1,
            covariates: BTreeMap::new(),
        };
        let s = schedule(&[14]);
        let mut obs = Vec::new();
        for t in 1..=N_TIMES {
            if t == 5 {
                continue;
            }
            obs.push(RatingObservation {
                individual_id: "A".into(),
                wave: 1,
                time_index: t,
                stakeholder: Stakeholder::Farmers,
                rating: 4,
                day: s.measurement_day(1, t).unwrap(),
            });
        }
        let ds = Dataset::new(vec![rec], obs, s, vec![]).unwrap();
        assert_eq!(ds.incomplete, vec!["A".to_string()]);
        assert!(ds.complete_only().observations.is_empty());
    }

    #[test]
    fn stakeholder_labels_round_trip() {
        for s in Stakeholder::ALL {
            assert_eq!(s.label().parse::<Stakeholder>().unwrap(), s);
        }
        assert!("banks".parse::<Stakeholder>().is_err());
    }
}
