//! JSON problem documents.
//!
//! ```json
//! { "horizon": 1.0,
//!   "dims": { "n": 1, "m": 1, "regimes": 2 },
//!   "generator": { "kind": "constant", "matrix": [[-1, 1], [1, -1]] },
//!   "coefficients": { "A": {...}, "B": ..., "C": ..., "D": ..., "b": ..., "sigma": ... },
//!   "weights": { "G": ..., "g": ..., "Q": ..., "S": ..., "R": ..., "q": ..., "rho": ... },
//!   "initial": { "state": [1.0], "regime": 1 } }
//! ```
//!
//! A coefficient is either a bare value (scalar, vector or nested array; a
//! scalar on a square shape means a multiple of the identity, elsewhere it
//! fills every entry) or an object
//! tagged by `kind`:
//!
//! * `zero`
//! * `constant` with `value` or `per_regime`
//! * `polynomial` with `coefficients` (ascending powers) or `per_regime`
//! * `table` with `times` and `values` or `per_regime`
//! * `profile` (vector terms) with `profile` and `direction` / `directions`
//! * `modulated` (vector terms) with `base`, `wiener_loading`, `drift_loading`
//!   and `direction` / `directions`
//!
//! Regimes are numbered from 1 in documents.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use super::provider::{Input, Kind, Loadings, MatrixProvider, ModulatedTerm, Profile};
use super::{Initial, ProblemSpec};
use crate::chain::{validate_generator, Generator, Rates};
use crate::error::{Error, Result};

type Obj = Map<String, Value>;

fn field<'a>(obj: &'a Obj, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::load(join(path, key), "missing field"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Obj> {
    v.as_object().ok_or_else(|| Error::load(path, "expected an object"))
}

fn num(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::load(path, "expected a finite number"))
}

fn uint(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::load(path, "expected a non-negative integer"))
}

fn num_list(v: &Value, path: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::load(path, "expected an array of numbers"))?
        .iter()
        .map(|x| num(x, path))
        .collect()
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::load(path, "expected an array"))
}

/// Scalar, vector or nested array into a `rows × cols` matrix.
fn matrix(v: &Value, rows: usize, cols: usize, path: &str) -> Result<DMatrix<f64>> {
    if let Some(x) = v.as_f64() {
        if !x.is_finite() {
            return Err(Error::load(path, "non-finite entry"));
        }
        if rows == cols {
            return Ok(DMatrix::identity(rows, cols) * x);
        }
        return Ok(DMatrix::from_element(rows, cols, x));
    }
    let arr = array(v, path)?;
    if arr.iter().all(|x| x.is_number()) {
        let xs = num_list(v, path)?;
        if cols == 1 && xs.len() == rows {
            return Ok(DMatrix::from_column_slice(rows, 1, &xs));
        }
        if rows == 1 && xs.len() == cols {
            return Ok(DMatrix::from_row_slice(1, cols, &xs));
        }
        return Err(Error::load(
            path,
            format!("vector of length {} does not fit a {rows}x{cols} block", xs.len()),
        ));
    }
    if arr.len() != rows {
        return Err(Error::load(path, format!("{} rows, expected {rows}", arr.len())));
    }
    let mut out = DMatrix::zeros(rows, cols);
    for (r, row) in arr.iter().enumerate() {
        let xs = num_list(row, path)?;
        if xs.len() != cols {
            return Err(Error::load(
                path,
                format!("row {} has {} entries, expected {cols}", r + 1, xs.len()),
            ));
        }
        for (c, x) in xs.into_iter().enumerate() {
            out[(r, c)] = x;
        }
    }
    Ok(out)
}

/// `value` replicated over regimes, or an explicit `per_regime` list.
fn per_regime<T>(obj: &Obj, single: &str, d: usize, path: &str, parse: impl Fn(&Value, &str) -> Result<T>) -> Result<Vec<T>>
where
    T: Clone,
{
    if let Some(list) = obj.get("per_regime") {
        let p = join(path, "per_regime");
        let arr = array(list, &p)?;
        if arr.len() != d {
            return Err(Error::load(p, format!("{} entries, expected {d} regimes", arr.len())));
        }
        arr.iter().map(|x| parse(x, &p)).collect()
    } else {
        let p = join(path, single);
        let one = parse(field(obj, single, path)?, &p)?;
        Ok(vec![one; d])
    }
}

fn kind_of<'a>(obj: &'a Obj, path: &str) -> Result<&'a str> {
    field(obj, "kind", path)?
        .as_str()
        .ok_or_else(|| Error::load(join(path, "kind"), "expected a string"))
}

fn matrix_provider(v: &Value, rows: usize, cols: usize, d: usize, path: &str) -> Result<MatrixProvider> {
    let Some(obj) = v.as_object() else {
        return Ok(MatrixProvider::constant(matrix(v, rows, cols, path)?, d));
    };
    let wrap = |r: Result<MatrixProvider>| r.map_err(|e| Error::load(path, e.to_string()));
    match kind_of(obj, path)? {
        "zero" => Ok(MatrixProvider::zeros(rows, cols, d)),
        "constant" => {
            let ms = per_regime(obj, "value", d, path, |x, p| matrix(x, rows, cols, p))?;
            wrap(MatrixProvider::new(rows, cols, Kind::Constant(ms)))
        }
        "polynomial" => {
            let cs = per_regime(obj, "coefficients", d, path, |x, p| {
                array(x, p)?.iter().map(|c| matrix(c, rows, cols, p)).collect::<Result<Vec<_>>>()
            })?;
            wrap(MatrixProvider::new(rows, cols, Kind::Polynomial(cs)))
        }
        "table" => {
            let times = num_list(field(obj, "times", path)?, &join(path, "times"))?;
            let values = per_regime(obj, "values", d, path, |x, p| {
                array(x, p)?.iter().map(|c| matrix(c, rows, cols, p)).collect::<Result<Vec<_>>>()
            })?;
            wrap(MatrixProvider::new(rows, cols, Kind::Table { times, values }))
        }
        other => Err(Error::load(
            join(path, "kind"),
            format!("unknown kind `{other}` for a matrix coefficient"),
        )),
    }
}

fn profile(v: &Value, path: &str) -> Result<Profile> {
    if let Some(x) = v.as_f64() {
        return Ok(Profile::Constant(x));
    }
    let obj = as_obj(v, path)?;
    let p = match kind_of(obj, path)? {
        "constant" => Profile::Constant(num(field(obj, "value", path)?, &join(path, "value"))?),
        "polynomial" => Profile::Polynomial(num_list(field(obj, "coefficients", path)?, &join(path, "coefficients"))?),
        "table" => Profile::Table {
            times: num_list(field(obj, "times", path)?, &join(path, "times"))?,
            values: num_list(field(obj, "values", path)?, &join(path, "values"))?,
        },
        "power" => Profile::Power {
            scale: obj.get("scale").map_or(Ok(1.0), |x| num(x, &join(path, "scale")))?,
            shift: num(field(obj, "shift", path)?, &join(path, "shift"))?,
            exponent: num(field(obj, "exponent", path)?, &join(path, "exponent"))?,
        },
        other => return Err(Error::load(join(path, "kind"), format!("unknown profile kind `{other}`"))),
    };
    p.validate().map_err(|e| Error::load(path, e.to_string()))?;
    Ok(p)
}

fn directions(obj: &Obj, len: usize, d: usize, path: &str) -> Result<Vec<DVector<f64>>> {
    let vecp = |x: &Value, p: &str| matrix(x, len, 1, p).map(|m| m.column(0).into_owned());
    if let Some(list) = obj.get("directions") {
        let p = join(path, "directions");
        let arr = array(list, &p)?;
        if arr.len() != d {
            return Err(Error::load(p, format!("{} entries, expected {d} regimes", arr.len())));
        }
        arr.iter().map(|x| vecp(x, &p)).collect()
    } else if let Some(x) = obj.get("direction") {
        Ok(vec![vecp(x, &join(path, "direction"))?; d])
    } else {
        Ok(vec![DVector::from_element(len, 1.0); d])
    }
}

fn input(v: &Value, len: usize, d: usize, path: &str) -> Result<Input> {
    if let Some(obj) = v.as_object() {
        match kind_of(obj, path)? {
            "profile" => {
                let pr = profile(field(obj, "profile", path)?, &join(path, "profile"))?;
                return Ok(Input::Profiled {
                    profile: pr,
                    direction: directions(obj, len, d, path)?,
                });
            }
            "modulated" => {
                let base = profile(field(obj, "base", path)?, &join(path, "base"))?;
                let wiener = num_list(field(obj, "wiener_loading", path)?, &join(path, "wiener_loading"))?;
                let drift = num_list(field(obj, "drift_loading", path)?, &join(path, "drift_loading"))?;
                if wiener.len() != d || drift.len() != d {
                    return Err(Error::load(path, format!("loadings need {d} entries")));
                }
                return Ok(Input::Modulated {
                    term: ModulatedTerm {
                        base,
                        loadings: Loadings { wiener, drift },
                    },
                    direction: directions(obj, len, d, path)?,
                });
            }
            _ => {}
        }
    }
    Ok(Input::Provider(matrix_provider(v, len, 1, d, path)?))
}

fn generator(v: &Value, d: usize) -> Result<Generator> {
    let path = "generator";
    let obj = as_obj(v, path)?;
    let wrap = |r: Result<Generator>| r.map_err(|e| Error::load(path, e.to_string()));
    let gen = match kind_of(obj, path)? {
        "constant" => wrap(Generator::constant(matrix(field(obj, "matrix", path)?, d, d, "generator.matrix")?))?,
        "table" => {
            let times = num_list(field(obj, "times", path)?, "generator.times")?;
            let ms = array(field(obj, "matrices", path)?, "generator.matrices")?
                .iter()
                .map(|m| matrix(m, d, d, "generator.matrices"))
                .collect::<Result<Vec<_>>>()?;
            wrap(Generator::table(times, ms))?
        }
        other => return Err(Error::load("generator.kind", format!("unknown kind `{other}`"))),
    };
    let gen = match obj.get("rate_bound") {
        Some(b) => gen.with_rate_bound(num(b, "generator.rate_bound")?),
        None => gen,
    };
    if gen.num_regimes() != d {
        return Err(Error::load(path, format!("{} regimes, dims say {d}", gen.num_regimes())));
    }
    Ok(gen)
}

/// Build a [`ProblemSpec`] from a parsed JSON document.
pub fn load_spec(doc: &Value) -> Result<ProblemSpec> {
    let root = as_obj(doc, "")?;
    let horizon = num(field(root, "horizon", "")?, "horizon")?;
    let dims = as_obj(field(root, "dims", "")?, "dims")?;
    let n = uint(field(dims, "n", "dims")?, "dims.n")?;
    let m = uint(field(dims, "m", "dims")?, "dims.m")?;
    let d = uint(field(dims, "regimes", "dims")?, "dims.regimes")?;
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::load("dims", "n, m and regimes must be positive"));
    }
    let gen = generator(field(root, "generator", "")?, d)?;
    let samples: Vec<f64> = (0..=1000).map(|k| horizon * k as f64 / 1000.0).collect();
    let rep = validate_generator(&gen, &samples).map_err(|e| Error::load("generator", e.to_string()))?;
    if !rep.passed {
        return Err(Error::load("generator", rep.violations.join("; ")));
    }
    for w in &rep.warnings {
        log::warn!("generator: {w}");
    }

    let co = as_obj(field(root, "coefficients", "")?, "coefficients")?;
    let we = as_obj(field(root, "weights", "")?, "weights")?;
    let mp = |obj: &Obj, key: &str, base: &str, r: usize, c: usize| -> Result<MatrixProvider> {
        matrix_provider(field(obj, key, base)?, r, c, d, &join(base, key))
    };
    let inp = |obj: &Obj, key: &str, base: &str, len: usize| -> Result<Input> { input(field(obj, key, base)?, len, d, &join(base, key)) };

    let g_prov = mp(we, "G", "weights", n, n)?;
    let Kind::Constant(g_mat) = g_prov.kind().clone() else {
        return Err(Error::load("weights.G", "terminal weight must be constant"));
    };
    let g_in = inp(we, "g", "weights", n)?;
    let g_vec = match &g_in {
        Input::Provider(p) => match p.kind() {
            Kind::Constant(v) => v.iter().map(|x| x.column(0).into_owned()).collect(),
            _ => return Err(Error::load("weights.g", "terminal weight must be constant")),
        },
        _ => return Err(Error::load("weights.g", "terminal weight must be deterministic")),
    };

    let initial = match root.get("initial") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let o = as_obj(v, "initial")?;
            let state = matrix(field(o, "state", "initial")?, n, 1, "initial.state")?.column(0).into_owned();
            let regime = uint(field(o, "regime", "initial")?, "initial.regime")?;
            if regime == 0 || regime > d {
                return Err(Error::load("initial.regime", format!("must lie in 1..={d}")));
            }
            Some(Initial { state, regime: regime - 1 })
        }
    };

    let spec = ProblemSpec {
        name: root.get("name").and_then(|v| v.as_str()).map(str::to_owned),
        horizon,
        n,
        m,
        generator: gen,
        a: mp(co, "A", "coefficients", n, n)?,
        b: mp(co, "B", "coefficients", n, m)?,
        c: mp(co, "C", "coefficients", n, n)?,
        d: mp(co, "D", "coefficients", n, m)?,
        drift: inp(co, "b", "coefficients", n)?,
        sigma: inp(co, "sigma", "coefficients", n)?,
        g_mat,
        g_vec,
        q_mat: mp(we, "Q", "weights", n, n)?,
        s_mat: mp(we, "S", "weights", m, n)?,
        r_mat: mp(we, "R", "weights", m, m)?,
        q_vec: inp(we, "q", "weights", n)?,
        rho: inp(we, "rho", "weights", m)?,
        initial,
    };
    spec.checked()
}

pub fn load_file(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::load("file", format!("{}: {e}", path.as_ref().display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::load("file", e.to_string()))?;
    load_spec(&doc)
}

fn render_matrix(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|r| Value::Array((0..m.ncols()).map(|c| json!(m[(r, c)])).collect()))
            .collect(),
    )
}

fn render_provider(p: &MatrixProvider) -> Value {
    let list = |v: &Vec<DMatrix<f64>>| Value::Array(v.iter().map(render_matrix).collect());
    match p.kind() {
        Kind::Constant(v) => json!({ "kind": "constant", "per_regime": list(v) }),
        Kind::Polynomial(v) => json!({
            "kind": "polynomial",
            "per_regime": v.iter().map(list).collect::<Vec<_>>()
        }),
        Kind::Table { times, values } => json!({
            "kind": "table",
            "times": times,
            "per_regime": values.iter().map(list).collect::<Vec<_>>()
        }),
    }
}

fn render_profile(p: &Profile) -> Value {
    match p {
        Profile::Constant(c) => json!({ "kind": "constant", "value": c }),
        Profile::Polynomial(c) => json!({ "kind": "polynomial", "coefficients": c }),
        Profile::Table { times, values } => json!({ "kind": "table", "times": times, "values": values }),
        Profile::Power { scale, shift, exponent } => {
            json!({ "kind": "power", "scale": scale, "shift": shift, "exponent": exponent })
        }
    }
}

fn render_directions(d: &[DVector<f64>]) -> Value {
    Value::Array(d.iter().map(|v| json!(v.as_slice())).collect())
}

fn render_input(i: &Input) -> Value {
    match i {
        Input::Provider(p) => render_provider(p),
        Input::Profiled { profile, direction } => json!({
            "kind": "profile",
            "profile": render_profile(profile),
            "directions": render_directions(direction)
        }),
        Input::Modulated { term, direction } => json!({
            "kind": "modulated",
            "base": render_profile(&term.base),
            "wiener_loading": term.loadings.wiener,
            "drift_loading": term.loadings.drift,
            "directions": render_directions(direction)
        }),
    }
}

/// Inverse of [`load_spec`].
pub fn render_spec(spec: &ProblemSpec) -> Value {
    let gen = match spec.generator.rates() {
        Rates::Constant(m) => json!({
            "kind": "constant",
            "matrix": render_matrix(m),
            "rate_bound": spec.generator.rate_bound()
        }),
        Rates::Table { times, matrices } => json!({
            "kind": "table",
            "times": times,
            "matrices": matrices.iter().map(render_matrix).collect::<Vec<_>>(),
            "rate_bound": spec.generator.rate_bound()
        }),
    };
    let mut doc = json!({
        "horizon": spec.horizon,
        "dims": { "n": spec.n, "m": spec.m, "regimes": spec.num_regimes() },
        "generator": gen,
        "coefficients": {
            "A": render_provider(&spec.a),
            "B": render_provider(&spec.b),
            "C": render_provider(&spec.c),
            "D": render_provider(&spec.d),
            "b": render_input(&spec.drift),
            "sigma": render_input(&spec.sigma),
        },
        "weights": {
            "G": { "kind": "constant", "per_regime": spec.g_mat.iter().map(render_matrix).collect::<Vec<_>>() },
            "g": { "kind": "constant", "per_regime": spec.g_vec.iter().map(|v| json!(v.as_slice())).collect::<Vec<_>>() },
            "Q": render_provider(&spec.q_mat),
            "S": render_provider(&spec.s_mat),
            "R": render_provider(&spec.r_mat),
            "q": render_input(&spec.q_vec),
            "rho": render_input(&spec.rho),
        }
    });
    if let Some(name) = &spec.name {
        doc["name"] = json!(name);
    }
    if let Some(init) = &spec.initial {
        doc["initial"] = json!({ "state": init.state.as_slice(), "regime": init.regime + 1 });
    }
    doc
}

pub fn save_file(spec: &ProblemSpec, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&render_spec(spec))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Value {
        json!({
            "horizon": 1.0,
            "dims": { "n": 1, "m": 1, "regimes": 2 },
            "generator": { "kind": "constant", "matrix": [[-1, 1], [1, -1]] },
            "coefficients": { "A": 0, "B": 0, "C": 0, "D": 0, "b": 0, "sigma": 0 },
            "weights": { "G": 1, "g": 0, "Q": 0, "S": 0, "R": 0, "q": 0, "rho": 0 }
        })
    }

    #[test]
    fn minimal_zero_problem_loads() {
        let spec = load_spec(&minimal()).unwrap();
        assert_eq!(spec.g_mat[1][(0, 0)], 1.0);
        assert!(spec.is_homogeneous());
    }

    #[test]
    fn missing_field_is_named() {
        let mut doc = minimal();
        doc["weights"].as_object_mut().unwrap().remove("R");
        match load_spec(&doc) {
            Err(Error::Load { field, .. }) => assert_eq!(field, "weights.R"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_generator_rejected() {
        let mut doc = minimal();
        doc["generator"]["matrix"] = json!([[-1, 0.5], [1, -1]]);
        assert!(matches!(load_spec(&doc), Err(Error::Load { field, .. }) if field == "generator"));
    }

    #[test]
    fn scalar_on_square_block_is_identity_multiple() {
        let mut doc = minimal();
        doc["dims"]["n"] = json!(2);
        doc["coefficients"]["B"] = json!([1, 0]);
        doc["weights"]["S"] = json!([[0, 0]]);
        let spec = load_spec(&doc).unwrap();
        assert_eq!(spec.g_mat[0], DMatrix::identity(2, 2));
    }

    #[test]
    fn round_trip() {
        let mut doc = minimal();
        doc["coefficients"]["A"] = json!({ "kind": "polynomial", "coefficients": [1, 2] });
        doc["coefficients"]["b"] = json!({
            "kind": "modulated",
            "base": { "kind": "power", "shift": 1, "exponent": -0.5 },
            "wiener_loading": [std::f64::consts::SQRT_2, 2.0],
            "drift_loading": [-2, -4]
        });
        doc["initial"] = json!({ "state": [1.0], "regime": 2 });
        let spec = load_spec(&doc).unwrap();
        let again = load_spec(&render_spec(&spec)).unwrap();
        assert_eq!(spec, again);
    }
}
