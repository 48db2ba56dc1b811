//! Trial CSV files and corpus manifests.
//!
//! A trial file is:
//!
//! ```text
//! subject_id,trial_kind,sample_rate
//! S01,normal,60
//! t,x1,y1,z1,…,x22,y22,z22,activity,r1,r2,r3,r4
//! 0,<66 coordinates>,<activity 0..5>,<four 0/1 rater flags>
//! …
//! ```
//!
//! Timesteps run `0..len` in order. Coordinates are written with the shortest
//! representation that parses back to the same `f64`, so writing a loaded
//! canonical file reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetError, Trial, TrialKind, ACTIVITY_CLASSES, COORDS, JOINTS, RATERS, SAMPLE_RATE};

const META_HEADER: [&str; 3] = ["subject_id", "trial_kind", "sample_rate"];

fn column_header() -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    for j in 1..=JOINTS {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{axis}{j}"));
        }
    }
    cols.push("activity".into());
    for r in 1..=RATERS {
        cols.push(format!("r{r}"));
    }
    cols
}

pub fn load_trial(path: &Path) -> Result<Trial, DatasetError> {
    let text = fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_trial(&text, &path.display().to_string())
}

/// Parses trial CSV text; `origin` labels errors.
pub fn parse_trial(text: &str, origin: &str) -> Result<Trial, DatasetError> {
    let err = |line: u64, msg: String| DatasetError::Parse { path: origin.to_string(), line, msg };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());

    let mut records = reader.records();
    let mut next = |what: &str| -> Result<(u64, csv::StringRecord), DatasetError> {
        match records.next() {
            Some(Ok(r)) => {
                let line = r.position().map_or(0, |p| p.line());
                Ok((line, r))
            }
            Some(Err(e)) => Err(err(e.position().map_or(0, |p| p.line()), e.to_string())),
            None => Err(err(0, format!("missing {what}"))),
        }
    };

    let (line, meta_names) = next("metadata header")?;
    if meta_names.iter().collect::<Vec<_>>() != META_HEADER {
        return Err(err(line, format!("expected header `{}`", META_HEADER.join(","))));
    }
    let (line, meta) = next("metadata row")?;
    if meta.len() != 3 {
        return Err(err(line, format!("metadata row has {} fields, expected 3", meta.len())));
    }
    let subject_id = meta[0].to_string();
    let kind: TrialKind = meta[1].parse().map_err(|m| err(line, m))?;
    let sample_rate: u32 = meta[2].parse().map_err(|_| err(line, format!("bad sample rate `{}`", &meta[2])))?;
    if sample_rate != SAMPLE_RATE {
        return Err(err(line, format!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz")));
    }

    let expected = column_header();
    let (line, header) = next("column header")?;
    if header.len() != expected.len() {
        let coords = header.iter().filter(|c| c.starts_with(['x', 'y', 'z'])).count();
        return Err(err(
            line,
            format!("header has {} columns ({coords} coordinate columns), expected {} ({COORDS})", header.len(), expected.len()),
        ));
    }
    if let Some((got, want)) = header.iter().zip(&expected).find(|(g, w)| g != w) {
        return Err(err(line, format!("header column `{got}`, expected `{want}`")));
    }

    let mut frames = Vec::new();
    let mut activity = Vec::new();
    let mut raters = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != expected.len() {
            return Err(err(line, format!("row has {} columns, expected {}", rec.len(), expected.len())));
        }
        let t: usize = rec[0].parse().map_err(|_| err(line, format!("bad timestep `{}`", &rec[0])))?;
        if t != activity.len() {
            return Err(err(line, format!("timestep {t} out of sequence, expected {}", activity.len())));
        }
        for field in rec.iter().skip(1).take(COORDS) {
            let v: f64 = field.parse().map_err(|_| err(line, format!("bad coordinate `{field}`")))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite coordinate `{field}`")));
            }
            frames.push(v);
        }
        let a = &rec[1 + COORDS];
        let a: u8 = a
            .parse()
            .ok()
            .filter(|&v: &u8| (v as usize) < ACTIVITY_CLASSES)
            .ok_or_else(|| err(line, format!("bad activity `{a}`")))?;
        activity.push(a);
        let mut flags = [false; RATERS];
        for (r, flag) in flags.iter_mut().enumerate() {
            *flag = match &rec[2 + COORDS + r] {
                "0" => false,
                "1" => true,
                other => return Err(err(line, format!("bad rater flag `{other}`"))),
            };
        }
        raters.push(flags);
    }

    let trial = Trial { subject_id, kind, sample_rate, frames, activity, raters };
    trial.validate()?;
    Ok(trial)
}

/// Canonical CSV text for a trial.
pub fn trial_to_csv(trial: &Trial) -> String {
    let mut out = String::with_capacity(trial.len() * COORDS * 8 + 512);
    out.push_str(&META_HEADER.join(","));
    out.push('\n');
    let _ = writeln!(out, "{},{},{}", trial.subject_id, trial.kind, trial.sample_rate);
    out.push_str(&column_header().join(","));
    out.push('\n');
    for t in 0..trial.len() {
        let _ = write!(out, "{t}");
        for v in trial.frame(t) {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{}", trial.activity[t]);
        for f in trial.raters[t] {
            out.push_str(if f { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

pub fn save_trial(trial: &Trial, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, trial_to_csv(trial))
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

/// Writes a manifest listing `files` relative to the manifest's directory.
pub fn write_manifest(path: &Path, files: &[PathBuf]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for f in files {
        text.push_str(&f.display().to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| DatasetError::Io { path: path.display().to_string(), source })
}

/// Loads every trial listed in a manifest; relative paths resolve against the manifest's directory.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Trial>, DatasetError> {
    let text = fs::read_to_string(manifest)
        .map_err(|source| DatasetError::Io { path: manifest.display().to_string(), source })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            load_trial(&full)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trial(len: usize) -> Trial {
        let frames = (0..len * COORDS).map(|i| (i as f64 * 0.37).sin() * 1.3).collect();
        let activity = (0..len).map(|t| (t % 6) as u8).collect();
        let raters = (0..len).map(|t| [t % 2 == 0, t % 3 == 0, false, true]).collect();
        Trial::new("S07", TrialKind::Difficult, frames, activity, raters).unwrap()
    }

    #[test]
    fn loads_a_well_formed_file() {
        let text = trial_to_csv(&sample_trial(180));
        let t = parse_trial(&text, "mem").unwrap();
        assert_eq!(t.len(), 180);
        assert_eq!(t.subject_id, "S07");
        assert_eq!(t.kind, TrialKind::Difficult);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let text = trial_to_csv(&sample_trial(50));
        let back = parse_trial(&text, "mem").unwrap();
        assert_eq!(back, sample_trial(50));
        assert_eq!(trial_to_csv(&back), text);
    }

    #[test]
    fn short_header_is_rejected_at_header_line() {
        let text = trial_to_csv(&sample_trial(3));
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replace(",z22", "");
        let bad = lines.join("\n");
        match parse_trial(&bad, "mem") {
            Err(DatasetError::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("65 coordinate columns"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_rows_report_their_line() {
        let text = trial_to_csv(&sample_trial(4));
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[5].split(',').collect();
        fields[3] = "inf";
        lines[5] = fields.join(",");
        match parse_trial(&lines.join("\n"), "mem") {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[4].push_str(",1");
        assert!(matches!(parse_trial(&lines.join("\n"), "mem"), Err(DatasetError::Parse { line: 5, .. })));

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = "S07,normal,50".into();
        assert!(matches!(parse_trial(&lines.join("\n"), "mem"), Err(DatasetError::Parse { line: 2, .. })));
    }
}
