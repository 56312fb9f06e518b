//! Variable catalog, observation stream parsing and episode assembly.
//!
//! Observation times are minutes since episode admission. Respiratory
//! support state is carried by catalog variables tagged with a
//! [`Modality`]: a positive value while the modality is off starts it, a
//! value of zero while it is on stops it, and positive values while on are
//! ongoing charting of the same therapy.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Physiologic,
    Lab,
    Drug,
    Intervention,
    Demographic,
}

impl VariableKind {
    pub fn is_therapy(self) -> bool {
        matches!(self, VariableKind::Drug | VariableKind::Intervention)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "HFNC")]
    Hfnc,
    #[serde(rename = "BiPAP")]
    Bipap,
    #[serde(rename = "NIMV")]
    Nimv,
    Intubation,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Hfnc,
        Modality::Bipap,
        Modality::Nimv,
        Modality::Intubation,
    ];

    /// BiPAP, NIMV and intubation are higher levels of support than HFNC.
    pub fn is_escalation(self) -> bool {
        !matches!(self, Modality::Hfnc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub unit: String,
    pub valid_min: f64,
    pub valid_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub therapy_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_group: Option<String>,
    /// Marks the variable whose charting carries start/stop of a support modality.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_modality: Option<Modality>,
}

impl VariableSpec {
    /// Name of the model feature this variable contributes to.
    pub fn feature_name(&self) -> &str {
        self.aggregation_group.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    variables: Vec<VariableSpec>,
}

impl Catalog {
    pub fn new(variables: Vec<VariableSpec>) -> Self {
        Self { variables }
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn get(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn modality_of(&self, variable: &str) -> Option<Modality> {
        self.get(variable).and_then(|v| v.support_modality)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.variables).expect("catalog serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_json(reader: impl Read) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }

    pub fn to_json(&self, writer: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

/// Training-set therapy usage: how many training episodes charted each variable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TherapyPrevalence {
    pub training_episodes: usize,
    pub episodes_with: BTreeMap<String, usize>,
}

impl TherapyPrevalence {
    pub fn from_episodes<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Self {
        let mut out = TherapyPrevalence::default();
        for ep in episodes {
            out.training_episodes += 1;
            let seen: BTreeSet<&str> = ep.records.iter().map(|r| r.variable.as_str()).collect();
            for name in seen {
                *out.episodes_with.entry(name.to_string()).or_default() += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedCatalog {
    pub catalog: Catalog,
    /// Drugs and interventions charted in fewer than 1% of training episodes.
    pub removed: Vec<String>,
}

/// Checks catalog invariants and prunes rare therapies.
///
/// A therapy is removed when it appears in strictly less than 1% of the
/// training episodes; a share of exactly 1% keeps it.
pub fn validate_catalog(
    catalog: &Catalog,
    prevalence: Option<&TherapyPrevalence>,
) -> Result<ValidatedCatalog> {
    let mut errors = Vec::new();
    let mut names = HashSet::new();
    let mut modalities = HashMap::new();
    let mut group_kinds: HashMap<&str, VariableKind> = HashMap::new();

    for v in catalog.variables() {
        if v.name.trim().is_empty() {
            errors.push("variable with empty name".to_string());
        }
        if !names.insert(v.name.as_str()) {
            errors.push(format!("duplicate variable name `{}`", v.name));
        }
        if !(v.valid_min.is_finite() && v.valid_max.is_finite()) || v.valid_min >= v.valid_max {
            errors.push(format!(
                "`{}`: valid_min ({}) must be below valid_max ({})",
                v.name, v.valid_min, v.valid_max
            ));
        }
        match (v.kind.is_therapy(), v.therapy_max) {
            (true, None) => errors.push(format!(
                "`{}`: therapy_max is required for {:?}",
                v.name, v.kind
            )),
            (true, Some(m)) if !(m.is_finite() && m > 0.0) => errors.push(format!(
                "`{}`: therapy_max must be positive, got {m}",
                v.name
            )),
            (false, Some(_)) => errors.push(format!(
                "`{}`: therapy_max only applies to drugs and interventions",
                v.name
            )),
            _ => {}
        }
        if let Some(m) = v.support_modality {
            if v.kind != VariableKind::Intervention {
                errors.push(format!(
                    "`{}`: support_modality requires kind intervention",
                    v.name
                ));
            }
            if let Some(prev) = modalities.insert(m, v.name.as_str()) {
                errors.push(format!(
                    "modality {m:?} carried by both `{prev}` and `{}`",
                    v.name
                ));
            }
        }
        if let Some(g) = v.aggregation_group.as_deref() {
            match group_kinds.get(g) {
                Some(k) if *k != v.kind => errors.push(format!(
                    "aggregation group `{g}` mixes kinds {k:?} and {:?}",
                    v.kind
                )),
                _ => {
                    group_kinds.insert(g, v.kind);
                }
            }
        }
    }
    for v in catalog.variables() {
        if v.aggregation_group.is_none() && group_kinds.contains_key(v.name.as_str()) {
            errors.push(format!(
                "`{}` collides with an aggregation group name",
                v.name
            ));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Catalog(errors));
    }

    let mut removed = Vec::new();
    let mut kept = Vec::with_capacity(catalog.len());
    for v in catalog.variables() {
        let rare = match prevalence {
            Some(p) if v.kind.is_therapy() && p.training_episodes > 0 => {
                let n = p.episodes_with.get(&v.name).copied().unwrap_or(0);
                // n / total < 1%, in integers
                n * 100 < p.training_episodes
            }
            _ => false,
        };
        if rare {
            removed.push(v.name.clone());
        } else {
            kept.push(v.clone());
        }
    }
    Ok(ValidatedCatalog {
        catalog: Catalog::new(kept),
        removed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub episode_id: String,
    #[serde(rename = "time_min")]
    pub time: f64,
    pub variable: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedStream {
    pub records: Vec<ObservationRecord>,
    pub rejected: Vec<Diagnostic>,
}

pub const OBSERVATION_HEADER: [&str; 4] = ["episode_id", "time_min", "variable", "value"];

/// Parses an observation stream, CSV (with header) or JSON-lines.
///
/// Invalid lines are skipped and reported with their 1-based line number.
/// Only an unreadable source is an error.
pub fn parse_observation_stream(mut source: impl Read, catalog: &Catalog) -> Result<ParsedStream> {
    let known: HashSet<&str> = catalog
        .variables()
        .iter()
        .map(|v| v.name.as_str())
        .collect();
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut out = ParsedStream::default();

    if text.trim_start().starts_with('{') {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_json_line(line).and_then(|r| check_record(r, &known)) {
                Ok(r) => out.records.push(r),
                Err(message) => out.rejected.push(Diagnostic {
                    line: i + 1,
                    message,
                }),
            }
        }
        return Ok(out);
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header_seen = false;
    for row in rdr.records() {
        let (line, parsed) = match row {
            Ok(rec) => {
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                if !header_seen {
                    header_seen = true;
                    if rec.iter().ne(OBSERVATION_HEADER) {
                        out.rejected.push(Diagnostic {
                            line,
                            message: format!("expected header `{}`", OBSERVATION_HEADER.join(",")),
                        });
                    }
                    continue;
                }
                (line, csv_fields(&rec))
            }
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                (line, Err(format!("malformed line: {e}")))
            }
        };
        match parsed.and_then(|r| check_record(r, &known)) {
            Ok(r) => out.records.push(r),
            Err(message) => out.rejected.push(Diagnostic { line, message }),
        }
    }
    Ok(out)
}

fn csv_fields(rec: &csv::StringRecord) -> std::result::Result<ObservationRecord, String> {
    if rec.len() != 4 {
        return Err(format!("expected 4 fields, found {}", rec.len()));
    }
    let time = parse_number(&rec[1], "time_min")?;
    let value = parse_number(&rec[3], "value")?;
    Ok(ObservationRecord {
        episode_id: rec[0].to_string(),
        time,
        variable: rec[2].to_string(),
        value,
    })
}

fn parse_json_line(text: &str) -> std::result::Result<ObservationRecord, String> {
    serde_json::from_str::<ObservationRecord>(text)
        .map_err(|e| format!("malformed json record: {e}"))
}

fn parse_number(field: &str, what: &str) -> std::result::Result<f64, String> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| format!("non-numeric {what} `{}`", field.trim()))
}

fn check_record(
    r: ObservationRecord,
    known: &HashSet<&str>,
) -> std::result::Result<ObservationRecord, String> {
    if r.episode_id.is_empty() {
        return Err("empty episode_id".into());
    }
    if !r.time.is_finite() || r.time < 0.0 {
        return Err(format!(
            "time must be a non-negative number, got {}",
            r.time
        ));
    }
    if !r.value.is_finite() {
        return Err(format!("non-finite value {}", r.value));
    }
    if !known.contains(r.variable.as_str()) {
        return Err(format!("unknown variable `{}`", r.variable));
    }
    Ok(r)
}

/// Writes records as observation CSV; finite numbers round-trip exactly.
pub fn write_observations<'a>(
    writer: impl Write,
    records: impl IntoIterator<Item = &'a ObservationRecord>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(OBSERVATION_HEADER)?;
    for r in records {
        w.write_record([
            r.episode_id.as_str(),
            &r.time.to_string(),
            r.variable.as_str(),
            &r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CareFlag {
    #[serde(rename = "DNR")]
    Dnr,
    #[serde(rename = "DNI")]
    Dni,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Disposition {
    GeneralCareFloor,
    Home,
    StepDownUnit,
    OperatingRoom,
    AnotherHospitalICU,
    AnotherICUCurrentHospital,
    Died,
    StillAdmitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportAction {
    Start,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportEvent {
    pub time: f64,
    pub modality: Modality,
    pub action: SupportAction,
}

pub const TAG_RESPIRATORY: &str = "respiratory";
pub const TAG_APNEA: &str = "apnea";

/// Per-episode metadata header (one JSON-lines object).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeHeader {
    pub episode_id: String,
    pub patient_id: String,
    pub age_at_admission: f64,
    pub sex: String,
    #[serde(default)]
    pub diagnosis_tags: BTreeSet<String>,
    #[serde(default)]
    pub care_flags: BTreeSet<CareFlag>,
    pub disposition: Disposition,
    pub discharge_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub records: Vec<ObservationRecord>,
    pub support_events: Vec<SupportEvent>,
}

impl Episode {
    pub fn id(&self) -> &str {
        &self.header.episode_id
    }

    pub fn patient_id(&self) -> &str {
        &self.header.patient_id
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.header.diagnosis_tags.contains(tag)
    }

    pub fn is_respiratory(&self) -> bool {
        self.has_tag(TAG_RESPIRATORY)
    }
}

pub fn read_headers(reader: impl Read) -> Result<Vec<EpisodeHeader>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let h: EpisodeHeader = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("metadata line {}: {e}", i + 1)))?;
        out.push(h);
    }
    Ok(out)
}

pub fn write_headers<'a>(
    mut writer: impl Write,
    headers: impl IntoIterator<Item = &'a EpisodeHeader>,
) -> Result<()> {
    for h in headers {
        serde_json::to_writer(&mut writer, h)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups records under their episode headers (header order is kept),
/// sorts them by time and extracts support start/stop events.
pub fn assemble_episodes(
    records: Vec<ObservationRecord>,
    headers: Vec<EpisodeHeader>,
    catalog: &Catalog,
) -> Result<Vec<Episode>> {
    let mut index = HashMap::with_capacity(headers.len());
    for (i, h) in headers.iter().enumerate() {
        if index.insert(h.episode_id.clone(), i).is_some() {
            return Err(Error::Invalid(format!(
                "duplicate metadata for episode `{}`",
                h.episode_id
            )));
        }
    }
    let mut grouped: Vec<Vec<ObservationRecord>> = vec![Vec::new(); headers.len()];
    for r in records {
        match index.get(&r.episode_id) {
            Some(&i) => grouped[i].push(r),
            None => return Err(Error::MissingMetadata(r.episode_id)),
        }
    }
    let modality: HashMap<&str, Modality> = catalog
        .variables()
        .iter()
        .filter_map(|v| v.support_modality.map(|m| (v.name.as_str(), m)))
        .collect();

    headers
        .into_iter()
        .zip(grouped)
        .map(|(header, mut recs)| {
            recs.sort_by(|a, b| a.time.total_cmp(&b.time));
            if let Some(last) = recs.last() {
                if last.time > header.discharge_time {
                    return Err(Error::Invalid(format!(
                        "episode `{}`: record at t={} after discharge at t={}",
                        header.episode_id, last.time, header.discharge_time
                    )));
                }
            }
            let support_events = extract_support_events(&header.episode_id, &recs, &modality)?;
            Ok(Episode {
                header,
                records: recs,
                support_events,
            })
        })
        .collect()
}

fn extract_support_events(
    episode: &str,
    records: &[ObservationRecord],
    modality: &HashMap<&str, Modality>,
) -> Result<Vec<SupportEvent>> {
    let mut on: HashMap<Modality, bool> = HashMap::new();
    let mut events = Vec::new();
    for r in records {
        let Some(&m) = modality.get(r.variable.as_str()) else {
            continue;
        };
        let active = on.entry(m).or_insert(false);
        match (*active, r.value > 0.0) {
            (false, true) => {
                *active = true;
                events.push(SupportEvent {
                    time: r.time,
                    modality: m,
                    action: SupportAction::Start,
                });
            }
            (true, false) => {
                *active = false;
                events.push(SupportEvent {
                    time: r.time,
                    modality: m,
                    action: SupportAction::Stop,
                });
            }
            (false, false) => {
                return Err(Error::UnmatchedStop {
                    episode: episode.to_string(),
                    modality: m,
                    time: r.time,
                })
            }
            (true, true) => {}
        }
    }
    Ok(events)
}

/// Inverse of [`assemble_episodes`] for the record content.
pub fn flatten_records(episodes: &[Episode]) -> Vec<ObservationRecord> {
    episodes
        .iter()
        .flat_map(|e| e.records.iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, kind: VariableKind) -> VariableSpec {
        VariableSpec {
            name: name.into(),
            kind,
            unit: String::new(),
            valid_min: 0.0,
            valid_max: 400.0,
            therapy_max: kind.is_therapy().then_some(10.0),
            aggregation_group: None,
            support_modality: None,
        }
    }

    fn catalog() -> Catalog {
        let mut hfnc = spec("hfnc", VariableKind::Intervention);
        hfnc.support_modality = Some(Modality::Hfnc);
        let mut bipap = spec("bipap", VariableKind::Intervention);
        bipap.support_modality = Some(Modality::Bipap);
        Catalog::new(vec![
            spec("heart_rate", VariableKind::Physiologic),
            hfnc,
            bipap,
        ])
    }

    fn header(id: &str) -> EpisodeHeader {
        EpisodeHeader {
            episode_id: id.into(),
            patient_id: format!("p-{id}"),
            age_at_admission: 2.0,
            sex: "F".into(),
            diagnosis_tags: BTreeSet::new(),
            care_flags: BTreeSet::new(),
            disposition: Disposition::Home,
            discharge_time: 10_000.0,
        }
    }

    fn rec(ep: &str, t: f64, var: &str, v: f64) -> ObservationRecord {
        ObservationRecord {
            episode_id: ep.into(),
            time: t,
            variable: var.into(),
            value: v,
        }
    }

    #[test]
    fn empty_stream() {
        let out = parse_observation_stream(&b""[..], &catalog()).unwrap();
        assert!(out.records.is_empty());
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn single_line() {
        let src = "episode_id,time_min,variable,value\nep1,120,heart_rate,140\n";
        let out = parse_observation_stream(src.as_bytes(), &catalog()).unwrap();
        assert_eq!(out.records, vec![rec("ep1", 120.0, "heart_rate", 140.0)]);
    }

    #[test]
    fn unknown_variable_is_reported_with_line() {
        let src =
            "episode_id,time_min,variable,value\nep1,120,heart_rate,140\nep1,130,blood_magic,3\n";
        let out = parse_observation_stream(src.as_bytes(), &catalog()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].line, 3);
        assert!(out.rejected[0].message.contains("blood_magic"));
    }

    #[test]
    fn non_numeric_value_rejected() {
        let src =
            "episode_id,time_min,variable,value\nep1,5,heart_rate,fast\nep1,-3,heart_rate,100\n";
        let out = parse_observation_stream(src.as_bytes(), &catalog()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(
            out.rejected.iter().map(|d| d.line).collect::<Vec<_>>(),
            vec![2, 3]
        );
    }

    #[test]
    fn json_lines_accepted() {
        let src = "{\"episode_id\":\"e\",\"time_min\":3,\"variable\":\"hfnc\",\"value\":8}\n";
        let out = parse_observation_stream(src.as_bytes(), &catalog()).unwrap();
        assert_eq!(out.records, vec![rec("e", 3.0, "hfnc", 8.0)]);
    }

    #[test]
    fn assemble_without_records() {
        let eps = assemble_episodes(vec![], vec![header("a")], &catalog()).unwrap();
        assert_eq!(eps.len(), 1);
        assert!(eps[0].records.is_empty());
    }

    #[test]
    fn support_events_extracted() {
        let recs = vec![
            rec("a", 180.0, "hfnc", 0.0),
            rec("a", 60.0, "hfnc", 20.0),
            rec("a", 90.0, "hfnc", 20.0),
        ];
        let eps = assemble_episodes(recs, vec![header("a")], &catalog()).unwrap();
        let ev = &eps[0].support_events;
        assert_eq!(
            ev,
            &vec![
                SupportEvent {
                    time: 60.0,
                    modality: Modality::Hfnc,
                    action: SupportAction::Start
                },
                SupportEvent {
                    time: 180.0,
                    modality: Modality::Hfnc,
                    action: SupportAction::Stop
                },
            ]
        );
    }

    #[test]
    fn stop_without_start_is_fatal() {
        let err = assemble_episodes(
            vec![rec("a", 50.0, "bipap", 0.0)],
            vec![header("a")],
            &catalog(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("t=50"), "{err}");
    }

    #[test]
    fn record_without_metadata_is_fatal() {
        let err = assemble_episodes(
            vec![rec("zz", 1.0, "heart_rate", 1.0)],
            vec![header("a")],
            &catalog(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingMetadata(id) if id == "zz"));
    }

    #[test]
    fn rare_therapy_threshold_is_strict() {
        let mut cat = catalog();
        cat.variables.push(spec("rare_drug", VariableKind::Drug));
        cat.variables.push(spec("edge_drug", VariableKind::Drug));
        let mut prev = TherapyPrevalence {
            training_episodes: 1000,
            ..Default::default()
        };
        prev.episodes_with.insert("rare_drug".into(), 5); // 0.5%
        prev.episodes_with.insert("edge_drug".into(), 10); // exactly 1%
        prev.episodes_with.insert("hfnc".into(), 1000);
        prev.episodes_with.insert("bipap".into(), 200);
        let v = validate_catalog(&cat, Some(&prev)).unwrap();
        assert_eq!(v.removed, vec!["rare_drug".to_string()]);
        assert!(v.catalog.get("edge_drug").is_some());
        // idempotent
        let again = validate_catalog(&v.catalog, Some(&prev)).unwrap();
        assert_eq!(again.catalog, v.catalog);
        assert!(again.removed.is_empty());
    }

    #[test]
    fn inverted_range_names_variable() {
        let mut bad = spec("temp", VariableKind::Physiologic);
        bad.valid_min = 50.0;
        bad.valid_max = 20.0;
        let err = validate_catalog(&Catalog::new(vec![bad]), None).unwrap_err();
        assert!(err.to_string().contains("temp"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let c = Catalog::new(vec![
            spec("x", VariableKind::Lab),
            spec("x", VariableKind::Lab),
        ]);
        assert!(matches!(validate_catalog(&c, None), Err(Error::Catalog(_))));
    }
}
