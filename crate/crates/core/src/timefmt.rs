//! Conversion between microseconds-since-epoch and the `xs:dateTime`
//! strings used in DASH manifests.

use alloc::format;
use alloc::string::String;

/// Civil date from days since 1970-01-01 (Howard Hinnant's algorithm).
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = (y - era * 400) as u64;
    let mp = if m > 2 { m - 3 } else { m + 9 } as u64;
    let doy = (153 * mp + 2) / 5 + d as u64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe as i64 - 719_468
}

/// Renders microseconds since the Unix epoch as `YYYY-MM-DDTHH:MM:SS[.ffffff]Z`.
pub fn format_epoch_us(us: u64) -> String {
    let secs = (us / 1_000_000) as i64;
    let frac = us % 1_000_000;
    let days = secs.div_euclid(86_400);
    let sod = secs.rem_euclid(86_400);
    let (y, m, d) = civil_from_days(days);
    let (hh, mm, ss) = (sod / 3600, (sod % 3600) / 60, sod % 60);
    if frac == 0 {
        format!("{y:04}-{m:02}-{d:02}T{hh:02}:{mm:02}:{ss:02}Z")
    } else {
        format!("{y:04}-{m:02}-{d:02}T{hh:02}:{mm:02}:{ss:02}.{frac:06}Z")
    }
}

/// Parses the subset of `xs:dateTime` produced by [`format_epoch_us`].
pub fn parse_epoch_us(s: &str) -> Option<u64> {
    let bytes = s.as_bytes();
    if bytes.len() < 20 || bytes[4] != b'-' || bytes[7] != b'-' || bytes[10] != b'T' {
        return None;
    }
    let num = |r: core::ops::Range<usize>| -> Option<i64> { s.get(r)?.parse().ok() };
    let (y, m, d) = (num(0..4)?, num(5..7)? as u32, num(8..10)? as u32);
    let (hh, mm, ss) = (num(11..13)?, num(14..16)?, num(17..19)?);
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return None;
    }
    let rest = &s[19..];
    let (frac_us, tail) = if let Some(stripped) = rest.strip_prefix('.') {
        let digits: String = stripped.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() || digits.len() > 6 {
            return None;
        }
        let mut v: u64 = digits.parse().ok()?;
        for _ in digits.len()..6 {
            v *= 10;
        }
        (v, &stripped[digits.len()..])
    } else {
        (0, rest)
    };
    if tail != "Z" {
        return None;
    }
    let days = days_from_civil(y, m, d);
    let secs = days * 86_400 + hh * 3600 + mm * 60 + ss;
    if secs < 0 {
        return None;
    }
    Some(secs as u64 * 1_000_000 + frac_us)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_zero() {
        assert_eq!(format_epoch_us(0), "1970-01-01T00:00:00Z");
        assert_eq!(parse_epoch_us("1970-01-01T00:00:00Z"), Some(0));
    }

    #[test]
    fn known_instant() {
        // 2024-03-01T12:30:45.250000Z
        let us = 1_709_296_245_000_000 + 250_000;
        let s = format_epoch_us(us);
        assert_eq!(s, "2024-03-01T12:30:45.250000Z");
        assert_eq!(parse_epoch_us(&s), Some(us));
    }

    #[test]
    fn round_trip_sweep() {
        let mut state = 99u64;
        for _ in 0..500 {
            let us = crate::prng::splitmix64(&mut state) % (4_000_000_000 * 1_000_000);
            assert_eq!(parse_epoch_us(&format_epoch_us(us)), Some(us));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(parse_epoch_us("not a date"), None);
        assert_eq!(parse_epoch_us("1970-13-01T00:00:00Z"), None);
        assert_eq!(parse_epoch_us("1970-01-01T00:00:00"), None);
    }
}
