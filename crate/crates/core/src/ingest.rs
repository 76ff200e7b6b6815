//! Loaders and writers for external data: stratified populations, audited
//! card samples, county election results and the Kalamazoo sample fixture.
//!
//! All CSV inputs carry a header row. Stratum numbers in files are 1-based.
//! Errors name the 1-based line (header = line 1) and the offending column.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assorter::{plurality_assorter, Vote};
use crate::error::{AuditError, Result};
use crate::population::{Category, Replacement, StratifiedPopulation, Stratum};
use crate::sim::csv_err;

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input)
}

fn record_line(rec: &csv::StringRecord, fallback: u64) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(fallback)
}

fn read_error(e: csv::Error) -> AuditError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AuditError::Io(io),
        csv::ErrorKind::Utf8 { err, .. } => AuditError::parse(line, format!("invalid UTF-8 in field {}", err.field() + 1)),
        other => AuditError::parse(line, format!("{other:?}")),
    }
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    let ok = got.len() >= expected.len() && expected.iter().zip(&got).all(|(e, g)| e == g);
    if ok {
        Ok(())
    } else {
        Err(AuditError::parse(
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ))
    }
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<&'a str> {
    rec.get(idx)
        .ok_or_else(|| AuditError::parse(line, format!("column {} (`{name}`) is missing", idx + 1)))
}

fn parse_stratum(s: &str, line: u64) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(k - 1),
        _ => Err(AuditError::parse(
            line,
            format!("column 1 (`stratum`): expected a stratum number from 1, found `{s}`"),
        )),
    }
}

/// An assorter value given as a number or as a plurality vote letter
/// (`w`, `l`, `o`).
pub fn parse_assorter_value(s: &str) -> Option<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    s.parse::<Vote>().ok().map(plurality_assorter)
}

fn parse_value(s: &str, col: usize, name: &str, line: u64) -> Result<f64> {
    parse_assorter_value(s).ok_or_else(|| {
        AuditError::parse(
            line,
            format!("column {col} (`{name}`): expected a number or vote letter, found `{s}`"),
        )
    })
}

/// Per-stratum urns read from `stratum,value,count` rows.
pub fn read_population_csv<R: Read>(input: R) -> Result<Vec<Vec<Category>>> {
    let mut rdr = reader(input);
    check_header(rdr.headers().map_err(read_error)?, &["stratum", "value", "count"])?;
    let mut strata: Vec<Vec<Category>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(read_error)?;
        let line = record_line(&rec, i as u64 + 2);
        let k = parse_stratum(field(&rec, 0, "stratum", line)?, line)?;
        let value = parse_value(field(&rec, 1, "value", line)?, 2, "value", line)?;
        let raw = field(&rec, 2, "count", line)?;
        let count = raw
            .parse::<u64>()
            .map_err(|_| AuditError::parse(line, format!("column 3 (`count`): expected a whole number, found `{raw}`")))?;
        if strata.len() <= k {
            strata.resize_with(k + 1, Vec::new);
        }
        strata[k].push(Category { value, count });
    }
    if let Some(k) = strata.iter().position(|s| s.is_empty()) {
        return Err(AuditError::parse(0, format!("stratum {} has no rows", k + 1)));
    }
    Ok(strata)
}

/// Reads a population file and checks every value against its stratum bound.
pub fn load_population<R: Read>(
    input: R,
    upper_bounds: &[f64],
    replacement: Replacement,
    seed: u64,
) -> Result<StratifiedPopulation> {
    let urns = read_population_csv(input)?;
    if urns.len() != upper_bounds.len() {
        return Err(AuditError::Config(format!(
            "population has {} strata but {} bounds were given",
            urns.len(),
            upper_bounds.len()
        )));
    }
    let strata = urns
        .into_iter()
        .zip(upper_bounds)
        .enumerate()
        .map(|(k, (urn, &u))| Stratum::new(k, u, urn))
        .collect::<Result<Vec<_>>>()?;
    StratifiedPopulation::new(strata, replacement, seed)
}

pub fn write_population_csv<W: Write>(out: W, urns: &[Vec<Category>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stratum", "value", "count"]).map_err(csv_err)?;
    for (k, urn) in urns.iter().enumerate() {
        for c in urn {
            w.write_record([(k + 1).to_string(), c.value.to_string(), c.count.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One audited card: manual interpretation and, for comparison strata, the
/// CVR, both as assorter values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleCard {
    #[serde(with = "crate::engine::one_based")]
    pub stratum: usize,
    pub mvr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cvr: Option<f64>,
}

/// Reads `stratum,mvr,cvr` rows in audit order; `cvr` may be blank or absent.
pub fn read_sample_csv<R: Read>(input: R) -> Result<Vec<SampleCard>> {
    let mut rdr = reader(input);
    check_header(rdr.headers().map_err(read_error)?, &["stratum", "mvr"])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(read_error)?;
        let line = record_line(&rec, i as u64 + 2);
        let stratum = parse_stratum(field(&rec, 0, "stratum", line)?, line)?;
        let mvr = parse_value(field(&rec, 1, "mvr", line)?, 2, "mvr", line)?;
        let cvr = match rec.get(2) {
            Some(s) if !s.is_empty() => Some(parse_value(s, 3, "cvr", line)?),
            _ => None,
        };
        out.push(SampleCard { stratum, mvr, cvr });
    }
    Ok(out)
}

pub fn write_sample_csv<W: Write>(out: W, cards: &[SampleCard]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stratum", "mvr", "cvr"]).map_err(csv_err)?;
    for c in cards {
        w.write_record([
            (c.stratum + 1).to_string(),
            c.mvr.to_string(),
            c.cvr.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The 58 California counties.
pub const CALIFORNIA_COUNTIES: [&str; 58] = [
    "Alameda", "Alpine", "Amador", "Butte", "Calaveras", "Colusa", "Contra Costa", "Del Norte",
    "El Dorado", "Fresno", "Glenn", "Humboldt", "Imperial", "Inyo", "Kern", "Kings", "Lake",
    "Lassen", "Los Angeles", "Madera", "Marin", "Mariposa", "Mendocino", "Merced", "Modoc", "Mono",
    "Monterey", "Napa", "Nevada", "Orange", "Placer", "Plumas", "Riverside", "Sacramento",
    "San Benito", "San Bernardino", "San Diego", "San Francisco", "San Joaquin", "San Luis Obispo",
    "San Mateo", "Santa Barbara", "Santa Clara", "Santa Cruz", "Shasta", "Sierra", "Siskiyou",
    "Solano", "Sonoma", "Stanislaus", "Sutter", "Tehama", "Trinity", "Tulare", "Tuolumne",
    "Ventura", "Yolo", "Yuba",
];

/// Statewide ballots cast in the 2020 presidential contest.
pub const CALIFORNIA_2020_BALLOTS: u64 = 17_500_881;

/// Per-county tallies reduced to the reported winner and runner-up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountyResult {
    pub county: String,
    pub total: u64,
    pub winner: u64,
    pub loser: u64,
    pub other: u64,
}

impl CountyResult {
    /// Plurality assorter urn: winner 1, loser 0, everything else 1/2.
    pub fn urn(&self) -> Vec<Category> {
        [(1.0, self.winner), (0.0, self.loser), (0.5, self.other)]
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|(value, count)| Category { value, count })
            .collect()
    }

    pub fn margin(&self) -> f64 {
        (self.winner as f64 - self.loser as f64) / self.total as f64
    }
}

/// County results with the statewide winner and runner-up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateResults {
    pub winner: String,
    pub loser: String,
    pub counties: Vec<CountyResult>,
}

impl StateResults {
    pub fn total(&self) -> u64 {
        self.counties.iter().map(|c| c.total).sum()
    }
}

/// Reads `county,candidate,votes` rows. The winner and runner-up are the two
/// candidates with the most statewide votes. Requires every one of the 58
/// counties and no others.
pub fn load_california_results<R: Read>(input: R) -> Result<StateResults> {
    let results = read_county_results(input)?;
    for name in CALIFORNIA_COUNTIES {
        if !results.counties.iter().any(|c| c.county == name) {
            return Err(AuditError::Fixture(format!("county `{name}` is missing")));
        }
    }
    if let Some(c) = results
        .counties
        .iter()
        .find(|c| !CALIFORNIA_COUNTIES.contains(&c.county.as_str()))
    {
        return Err(AuditError::Fixture(format!("unknown county `{}`", c.county)));
    }
    Ok(results)
}

/// Reads `county,candidate,votes` rows for any set of counties, in order of
/// first appearance.
pub fn read_county_results<R: Read>(input: R) -> Result<StateResults> {
    let mut rdr = reader(input);
    check_header(rdr.headers().map_err(read_error)?, &["county", "candidate", "votes"])?;
    let mut order: Vec<String> = Vec::new();
    let mut tallies: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut statewide: BTreeMap<String, u64> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(read_error)?;
        let line = record_line(&rec, i as u64 + 2);
        let county = field(&rec, 0, "county", line)?.to_string();
        let candidate = field(&rec, 1, "candidate", line)?.to_string();
        let raw = field(&rec, 2, "votes", line)?;
        if county.is_empty() || candidate.is_empty() {
            return Err(AuditError::parse(line, "county and candidate must be non-empty"));
        }
        let votes = raw
            .replace(',', "")
            .parse::<u64>()
            .map_err(|_| AuditError::parse(line, format!("column 3 (`votes`): expected a whole number, found `{raw}`")))?;
        if !tallies.contains_key(&county) {
            order.push(county.clone());
        }
        let entry = tallies.entry(county).or_default().entry(candidate.clone()).or_insert(0);
        *entry += votes;
        *statewide.entry(candidate).or_insert(0) += votes;
    }
    let mut ranked: Vec<(String, u64)> = statewide.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if ranked.len() < 2 {
        return Err(AuditError::Fixture("results need at least two candidates".into()));
    }
    let winner = ranked[0].0.clone();
    let loser = ranked[1].0.clone();
    let counties = order
        .into_iter()
        .map(|county| {
            let t = &tallies[&county];
            let total: u64 = t.values().sum();
            let w = t.get(&winner).copied().unwrap_or(0);
            let l = t.get(&loser).copied().unwrap_or(0);
            if total == 0 {
                return Err(AuditError::Fixture(format!("county `{county}` has no votes")));
            }
            Ok(CountyResult {
                county,
                total,
                winner: w,
                loser: l,
                other: total - w - l,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StateResults { winner, loser, counties })
}

pub fn write_county_results<W: Write>(out: W, results: &StateResults) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["county", "candidate", "votes"]).map_err(csv_err)?;
    for c in &results.counties {
        for (name, votes) in [(&results.winner, c.winner), (&results.loser, c.loser)] {
            w.write_record([c.county.as_str(), name.as_str(), &votes.to_string()])
                .map_err(csv_err)?;
        }
        if c.other > 0 {
            w.write_record([c.county.as_str(), "Other", &c.other.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Stratum sizes, margins and audited sample of the Kalamazoo pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalamazooData {
    /// Ballots cast in the CVR and no-CVR strata.
    pub sizes: [u64; 2],
    /// Diluted margins of the CVR and no-CVR strata.
    pub margins: [f64; 2],
    /// CVR-stratum cards in audit order as (cvr, mvr) assorter values.
    pub cvr_sample: Vec<[f64; 2]>,
    /// No-CVR stratum assorter values in audit order.
    pub polling_sample: Vec<f64>,
}

/// On-disk fixture: data plus provenance and a SHA-256 of the compact JSON
/// serialisation of `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalamazooFixture {
    pub provenance: String,
    #[serde(default)]
    pub synthetic: bool,
    pub data: KalamazooData,
    pub sha256: String,
}

pub const KALAMAZOO_SIZES: [u64; 2] = [5294, 22732];
pub const KALAMAZOO_MARGINS: [f64; 2] = [0.55, 0.57];
pub const KALAMAZOO_SAMPLE_SIZES: [usize; 2] = [8, 32];

impl KalamazooData {
    pub fn checksum(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes != KALAMAZOO_SIZES {
            return Err(AuditError::Fixture(format!(
                "stratum sizes {:?}, expected {:?}",
                self.sizes, KALAMAZOO_SIZES
            )));
        }
        if self
            .margins
            .iter()
            .zip(KALAMAZOO_MARGINS)
            .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(AuditError::Fixture(format!(
                "margins {:?}, expected {:?}",
                self.margins, KALAMAZOO_MARGINS
            )));
        }
        if [self.cvr_sample.len(), self.polling_sample.len()] != KALAMAZOO_SAMPLE_SIZES {
            return Err(AuditError::Fixture(format!(
                "sample sizes ({}, {}), expected {:?}",
                self.cvr_sample.len(),
                self.polling_sample.len(),
                KALAMAZOO_SAMPLE_SIZES
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.cvr_sample.iter().flatten().all(|&v| in_unit(v)) || !self.polling_sample.iter().all(|&v| in_unit(v)) {
            return Err(AuditError::Fixture("sample assorter values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Error-free stand-in: every CVR-stratum card matches its CVR for the
    /// winner, and the no-CVR sample splits 25 winner to 7 loser votes, the
    /// closest 32-card split to the stratum margin.
    pub fn synthetic() -> Self {
        let winners = 25;
        KalamazooData {
            sizes: KALAMAZOO_SIZES,
            margins: KALAMAZOO_MARGINS,
            cvr_sample: vec![[1.0, 1.0]; KALAMAZOO_SAMPLE_SIZES[0]],
            polling_sample: (0..KALAMAZOO_SAMPLE_SIZES[1])
                .map(|i| if i < winners { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

impl KalamazooFixture {
    pub fn new(provenance: impl Into<String>, synthetic: bool, data: KalamazooData) -> Result<Self> {
        let sha256 = data.checksum()?;
        Ok(KalamazooFixture {
            provenance: provenance.into(),
            synthetic,
            data,
            sha256,
        })
    }

    pub fn synthetic() -> Self {
        KalamazooFixture::new(
            "synthetic error-free sample at the published stratum sizes and margins",
            true,
            KalamazooData::synthetic(),
        )
        .expect("synthetic data serialises")
    }
}

/// Reads and verifies a fixture: checksum first, then sizes, margins and
/// sample counts.
pub fn load_kalamazoo_fixture<R: Read>(input: R) -> Result<KalamazooFixture> {
    let fixture: KalamazooFixture = serde_json::from_reader(input)?;
    let actual = fixture.data.checksum()?;
    if !actual.eq_ignore_ascii_case(&fixture.sha256) {
        return Err(AuditError::Fixture(format!(
            "checksum mismatch: file says {}, data hashes to {actual}",
            fixture.sha256
        )));
    }
    fixture.data.validate()?;
    Ok(fixture)
}

pub fn write_kalamazoo_fixture<W: Write>(out: W, fixture: &KalamazooFixture) -> Result<()> {
    serde_json::to_writer_pretty(out, fixture)?;
    Ok(())
}
