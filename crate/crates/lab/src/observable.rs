//! Observable strings: `occ(x)`, `prod(x;y;..)`, `centered(x;y;..)`, `diff(x;y)`,
//! `const(c)`, and sums of these joined by `+`. Points are comma-separated
//! coordinates, e.g. `prod(0,0;1,0)` in two dimensions.

use exvar_core::configspace::LocalFunction;
use exvar_core::lattice::Point;

use crate::error::{config_err, LabError, LabResult};

pub fn parse_observable(spec: &str, dim: usize, rho: f64) -> LabResult<LocalFunction> {
    let mut total = LocalFunction::zero();
    for part in spec.split('+').map(str::trim) {
        if part.is_empty() {
            return config_err(format!("empty summand in observable '{spec}'"));
        }
        total = total.add(&parse_one(part, dim, rho)?);
    }
    Ok(total)
}

fn parse_one(s: &str, dim: usize, rho: f64) -> LabResult<LocalFunction> {
    let (kind, rest) =
        s.split_once('(').ok_or_else(|| LabError::Config(format!("observable '{s}' must look like kind(args)")))?;
    let args = rest
        .strip_suffix(')')
        .ok_or_else(|| LabError::Config(format!("observable '{s}' lacks a closing parenthesis")))?;
    let kind = kind.trim();
    if kind == "const" {
        let c: f64 = args.trim().parse().map_err(|_| LabError::Config(format!("const({args}) is not a number")))?;
        return Ok(LocalFunction::constant(c));
    }
    let points = parse_points(args, dim)?;
    let mut sorted = points.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != points.len() {
        return config_err(format!("observable '{s}' repeats a site"));
    }
    match (kind, points.len()) {
        ("occ", 1) => Ok(LocalFunction::occupation(points[0])),
        ("diff", 2) => Ok(LocalFunction::occupation(points[0]).sub(&LocalFunction::occupation(points[1]))),
        ("prod", _) => {
            let mut f = LocalFunction::constant(1.0);
            for &p in &points {
                f = f.mul(&LocalFunction::occupation(p))?;
            }
            Ok(f)
        }
        ("centered", _) => Ok(LocalFunction::centered_product(&points, rho)?),
        ("occ", n) | ("diff", n) => {
            config_err(format!("{kind} takes {} site(s), got {n}", if kind == "occ" { 1 } else { 2 }))
        }
        _ => config_err(format!("unknown observable kind '{kind}'")),
    }
}

fn parse_points(args: &str, dim: usize) -> LabResult<Vec<Point>> {
    args.split(';')
        .map(|p| {
            let coords = p
                .split(',')
                .map(|c| c.trim().parse::<i64>().map_err(|_| LabError::Config(format!("bad coordinate '{c}'"))))
                .collect::<LabResult<Vec<i64>>>()?;
            if coords.len() != dim {
                return config_err(format!("point '{p}' has {} coordinates, dimension is {dim}", coords.len()));
            }
            Ok(Point::new(&coords))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(pts: &[i64]) -> impl Fn(&Point) -> bool + '_ {
        move |x: &Point| pts.contains(&x.coord(0))
    }

    #[test]
    fn kinds() {
        let f = parse_observable("occ(0)", 1, 0.5).unwrap();
        assert_eq!(f.eval(occ(&[0])), 1.0);
        let f = parse_observable("prod(0;1)", 1, 0.5).unwrap();
        assert_eq!(f.eval(occ(&[0])), 0.0);
        assert_eq!(f.eval(occ(&[0, 1])), 1.0);
        let f = parse_observable("diff(0;1)", 1, 0.5).unwrap();
        assert_eq!(f.eval(occ(&[1])), -1.0);
        let f = parse_observable("centered(0)", 1, 0.25).unwrap();
        assert_eq!(f.eval(occ(&[])), -0.25);
        let f = parse_observable("occ(0) + const(2)", 1, 0.5).unwrap();
        assert_eq!(f.eval(occ(&[0])), 3.0);
    }

    #[test]
    fn two_dimensional() {
        let f = parse_observable("prod(0,0;1,0)", 2, 0.5).unwrap();
        let on = |x: &Point| x.coord(1) == 0 && x.coord(0) <= 1;
        assert_eq!(f.eval(on), 1.0);
    }

    #[test]
    fn rejects() {
        for bad in ["occ", "occ(0", "occ(0;1)", "foo(0)", "occ(a)", "prod(0;0)", "occ(0,0)", "", "occ(0)+"] {
            assert!(parse_observable(bad, 1, 0.5).is_err(), "{bad}");
        }
    }
}
