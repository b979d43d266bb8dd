use chrono::{DateTime, NaiveDate, NaiveDateTime};

/// Timestamps are naive; inputs with an offset are converted to UTC.
pub type Instant = NaiveDateTime;

const FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

pub fn parse_instant(s: &str) -> Option<Instant> {
    let s = s.trim();
    for f in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t);
        }
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    for f in ["%Y-%m-%d", "%Y/%m/%d", "%Y%m%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, f) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    None
}

pub fn format_instant(t: &Instant) -> String {
    t.format("%Y-%m-%d %H:%M:%S").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_common_layouts() {
        let a = parse_instant("2016-07-01 02:00:00").unwrap();
        assert_eq!(parse_instant("2016-07-01T02:00:00").unwrap(), a);
        assert_eq!(parse_instant("2016-07-01T04:00:00+02:00").unwrap(), a);
        assert_eq!(format_instant(&parse_instant("2016-07-01").unwrap()), "2016-07-01 00:00:00");
        assert!(parse_instant("yesterday").is_none());
    }
}
