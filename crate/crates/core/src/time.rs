//! Exact rational time: periods, hyperperiods and execution grids.

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

pub type Time = Ratio<i64>;

pub fn time(num: i64, den: i64) -> Time {
    Ratio::new(num, den)
}

pub fn to_f64(t: Time) -> f64 {
    t.to_f64().expect("rational fits in f64")
}

/// Parses `p/q`, an integer, or a finite decimal such as `0.25`.
pub fn parse_time(s: &str) -> Result<Time> {
    let s = s.trim();
    let bad = || Error::Parse(format!("not a rational time: `{s}`"));
    if let Some((p, q)) = s.split_once('/') {
        let p: i64 = p.trim().parse().map_err(|_| bad())?;
        let q: i64 = q.trim().parse().map_err(|_| bad())?;
        if q == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(p, q));
    }
    if let Some((int, frac)) = s.split_once('.') {
        if frac.len() > 15 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10i64.pow(frac.len() as u32);
        let neg = int.starts_with('-');
        let int: i64 = if int.is_empty() || int == "-" { 0 } else { int.parse().map_err(|_| bad())? };
        let frac: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int.abs() * den + frac;
        return Ok(Ratio::new(if neg { -num } else { num }, den));
    }
    s.parse::<i64>().map(Ratio::from_integer).map_err(|_| bad())
}

pub fn format_time(t: Time) -> String {
    if t.is_integer() {
        t.numer().to_string()
    } else {
        format!("{}/{}", t.numer(), t.denom())
    }
}

/// True when `t` is a non-negative integer multiple of `period > 0`.
pub fn is_multiple(t: Time, period: Time) -> bool {
    period > Time::zero() && (t / period).is_integer()
}

/// Least common multiple of positive rationals:
/// lcm(numerators) / gcd(denominators) in lowest terms.
pub fn hyperperiod(periods: &[Time]) -> Result<Time> {
    let mut positive = periods.iter().filter(|p| p.is_positive());
    let first = *positive.next().ok_or(Error::EmptyTimeBase)?;
    Ok(positive.fold(first, |acc, p| {
        let num = acc.numer().lcm(p.numer());
        let den = acc.denom().gcd(p.denom());
        Ratio::new(num, den)
    }))
}

/// Sorted union of `{k*tau <= tf}` over all positive periods and declared
/// integration steps, plus `{0, tf}`.
pub fn time_grid(periods: &[Time], steps: &[Time], tf: Time) -> Result<Vec<Time>> {
    if !tf.is_positive() {
        return Err(Error::Config(format!("final time must be positive, got {}", format_time(tf))));
    }
    let bases: Vec<Time> = periods
        .iter()
        .chain(steps)
        .copied()
        .filter(|p| p.is_positive())
        .collect();
    if bases.is_empty() {
        return Err(Error::EmptyTimeBase);
    }
    let mut grid = vec![Time::zero(), tf];
    for tau in bases {
        let count = (tf / tau).floor().to_integer();
        grid.extend((1..=count).map(|k| tau * k));
    }
    grid.sort();
    grid.dedup();
    Ok(grid)
}

pub mod serde_time {
    //! Serialises [`Time`] as `"p/q"` strings.
    use super::{format_time, parse_time, Time};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Time, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_time(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Time, D::Error> {
        let s = String::deserialize(d)?;
        parse_time(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_single_rate() {
        let g = time_grid(&[time(1, 1)], &[], time(3, 1)).unwrap();
        assert_eq!(g, (0..=3).map(|k| time(k, 1)).collect::<Vec<_>>());
    }

    #[test]
    fn grid_multirate_by_enumeration() {
        let g = time_grid(&[time(1, 2), time(1, 3)], &[], time(1, 1)).unwrap();
        assert_eq!(g, vec![time(0, 1), time(1, 3), time(1, 2), time(2, 3), time(1, 1)]);
    }

    #[test]
    fn grid_continuous_with_step() {
        let g = time_grid(&[Time::zero()], &[time(1, 4)], time(1, 1)).unwrap();
        assert_eq!(g, (0..=4).map(|k| time(k, 4)).collect::<Vec<_>>());
        assert!(matches!(time_grid(&[Time::zero()], &[], time(1, 1)), Err(Error::EmptyTimeBase)));
    }

    #[test]
    fn grid_includes_final_time_off_lattice() {
        let g = time_grid(&[time(1, 1)], &[], time(5, 2)).unwrap();
        assert_eq!(g.last(), Some(&time(5, 2)));
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn hyperperiod_cases() {
        assert_eq!(hyperperiod(&[time(1, 2), time(1, 3)]).unwrap(), time(1, 1));
        assert_eq!(hyperperiod(&[time(2, 1), time(3, 1)]).unwrap(), time(6, 1));
        assert_eq!(hyperperiod(&[time(3, 7)]).unwrap(), time(3, 7));
        assert_eq!(hyperperiod(&[time(2, 3), time(3, 4)]).unwrap(), time(6, 1));
    }

    #[test]
    fn hyperperiod_is_smallest_common_multiple() {
        // Brute force over candidate multiples of 1/denominator-lcm.
        let ps = [time(1, 2), time(1, 3), time(3, 4)];
        let h = hyperperiod(&ps).unwrap();
        let unit = time(1, 12);
        let first = (1..1000)
            .map(|k| unit * k)
            .find(|t| ps.iter().all(|p| is_multiple(*t, *p)))
            .unwrap();
        assert_eq!(h, first);
    }

    #[test]
    fn parse_forms() {
        assert_eq!(parse_time("1/2").unwrap(), time(1, 2));
        assert_eq!(parse_time("3").unwrap(), time(3, 1));
        assert_eq!(parse_time("0.25").unwrap(), time(1, 4));
        assert_eq!(parse_time("-0.5").unwrap(), time(-1, 2));
        assert!(parse_time("1/0").is_err());
        assert!(parse_time("abc").is_err());
    }
}
