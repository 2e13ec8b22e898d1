//! Independent model of the wire layout: random schemas, random values and
//! a from-scratch encoder written from the layout rules alone.

use rand::rngs::StdRng;
use rand::Rng;

use nodewrap::schema::{MessageValue, Value};

#[derive(Debug, Clone)]
pub enum Ty {
    F64,
    F32,
    I64,
    I32,
    U8,
    Bool,
    Str,
    Fixed(Box<Ty>, u32),
    Var(Box<Ty>),
    Inline(Vec<(String, Ty)>),
    /// Index of an earlier schema in the same case.
    Ref(usize),
}

#[derive(Debug, Clone)]
pub enum OVal {
    F64(u64),
    F32(u32),
    I64(i64),
    I32(i32),
    U8(u8),
    Bool(bool),
    Str(String),
    List(Vec<OVal>),
    Struct(Vec<OVal>),
}

/// One fuzz case: schemas `S0..Sn`, the value is of the last one.
pub struct Case {
    pub schemas: Vec<Vec<(String, Ty)>>,
    pub value: Vec<OVal>,
}

/// Encodes to no bytes at all; the registry refuses var-lists of these.
fn zero_sized(t: &Ty, earlier: &[Vec<(String, Ty)>]) -> bool {
    match t {
        Ty::Fixed(e, n) => *n == 0 || zero_sized(e, earlier),
        Ty::Inline(fs) => fs.iter().all(|(_, t)| zero_sized(t, earlier)),
        Ty::Ref(i) => earlier[*i].iter().all(|(_, t)| zero_sized(t, earlier)),
        _ => false,
    }
}

fn gen_ty(rng: &mut StdRng, depth: u32, earlier: &[Vec<(String, Ty)>]) -> Ty {
    let leaf = depth == 0 || rng.gen_bool(0.5);
    if leaf {
        return match rng.gen_range(0..7) {
            0 => Ty::F64,
            1 => Ty::F32,
            2 => Ty::I64,
            3 => Ty::I32,
            4 => Ty::U8,
            5 => Ty::Bool,
            _ => Ty::Str,
        };
    }
    match rng.gen_range(0..4) {
        0 => Ty::Fixed(Box::new(gen_ty(rng, depth - 1, earlier)), rng.gen_range(0..4)),
        1 => loop {
            let e = gen_ty(rng, depth - 1, earlier);
            if !zero_sized(&e, earlier) {
                break Ty::Var(Box::new(e));
            }
        },
        2 if !earlier.is_empty() => Ty::Ref(rng.gen_range(0..earlier.len())),
        _ => Ty::Inline(gen_fields(rng, depth - 1, earlier)),
    }
}

fn gen_fields(rng: &mut StdRng, depth: u32, earlier: &[Vec<(String, Ty)>]) -> Vec<(String, Ty)> {
    (0..rng.gen_range(1..5)).map(|i| (format!("f{i}"), gen_ty(rng, depth, earlier))).collect()
}

fn gen_str(rng: &mut StdRng) -> String {
    let n = rng.gen_range(0..6);
    (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => rng.gen_range('a'..='z'),
            1 => rng.gen_range('\u{80}'..='\u{7ff}'),
            _ => char::from_u32(rng.gen_range(0x1000..0x10000)).filter(|c| !c.is_control()).unwrap_or('x'),
        })
        .collect()
}

fn gen_val(rng: &mut StdRng, ty: &Ty, schemas: &[Vec<(String, Ty)>]) -> OVal {
    match ty {
        Ty::F64 => OVal::F64(if rng.gen_bool(0.5) { rng.gen() } else { rng.gen_range(-1e6..1e6f64).to_bits() }),
        Ty::F32 => OVal::F32(rng.gen()),
        Ty::I64 => OVal::I64(rng.gen()),
        Ty::I32 => OVal::I32(rng.gen()),
        Ty::U8 => OVal::U8(rng.gen()),
        Ty::Bool => OVal::Bool(rng.gen()),
        Ty::Str => OVal::Str(gen_str(rng)),
        Ty::Fixed(t, n) => OVal::List((0..*n).map(|_| gen_val(rng, t, schemas)).collect()),
        Ty::Var(t) => OVal::List((0..rng.gen_range(0..4)).map(|_| gen_val(rng, t, schemas)).collect()),
        Ty::Inline(fs) => OVal::Struct(fs.iter().map(|(_, t)| gen_val(rng, t, schemas)).collect()),
        Ty::Ref(i) => OVal::Struct(schemas[*i].iter().map(|(_, t)| gen_val(rng, t, schemas)).collect()),
    }
}

pub fn gen_case(rng: &mut StdRng) -> Case {
    let n = rng.gen_range(1..4);
    let mut schemas = Vec::new();
    for _ in 0..n {
        let fields = gen_fields(rng, 3, &schemas);
        schemas.push(fields);
    }
    let last = schemas.last().unwrap().clone();
    let value = last.iter().map(|(_, t)| gen_val(rng, t, &schemas)).collect();
    Case { schemas, value }
}

fn ty_text(t: &Ty) -> String {
    match t {
        Ty::F64 => "f64".into(),
        Ty::F32 => "f32".into(),
        Ty::I64 => "i64".into(),
        Ty::I32 => "i32".into(),
        Ty::U8 => "u8".into(),
        Ty::Bool => "bool".into(),
        Ty::Str => "string".into(),
        Ty::Fixed(t, n) => format!("[{}; {n}]", ty_text(t)),
        Ty::Var(t) => format!("[{}]", ty_text(t)),
        Ty::Inline(fs) => format!("{{ {} }}", fields_text(fs)),
        Ty::Ref(i) => format!("S{i}"),
    }
}

fn fields_text(fs: &[(String, Ty)]) -> String {
    fs.iter().map(|(n, t)| format!("{n}: {}", ty_text(t))).collect::<Vec<_>>().join(", ")
}

impl Case {
    pub fn schema_text(&self) -> String {
        self.schemas.iter().enumerate().map(|(i, fs)| format!("schema S{i} {{ {} }}\n", fields_text(fs))).collect()
    }

    pub fn name(&self) -> String {
        format!("S{}", self.schemas.len() - 1)
    }

    pub fn message(&self) -> MessageValue {
        MessageValue { schema: self.name(), fields: self.value.iter().map(to_value).collect() }
    }
}

/// Scalars and var-lists; fixed lists are handled by [`enc_typed`].
fn enc(v: &OVal, out: &mut Vec<u8>) {
    match v {
        OVal::F64(b) => out.extend(b.to_le_bytes()),
        OVal::F32(b) => out.extend(b.to_le_bytes()),
        OVal::I64(x) => out.extend(x.to_le_bytes()),
        OVal::I32(x) => out.extend(x.to_le_bytes()),
        OVal::U8(x) => out.push(*x),
        OVal::Bool(b) => out.push(u8::from(*b)),
        OVal::Str(s) => {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        }
        OVal::List(items) => {
            out.extend((items.len() as u32).to_le_bytes());
            items.iter().for_each(|i| enc(i, out));
        }
        OVal::Struct(items) => items.iter().for_each(|i| enc(i, out)),
    }
}

fn enc_typed(t: &Ty, v: &OVal, schemas: &[Vec<(String, Ty)>], out: &mut Vec<u8>) {
    match (t, v) {
        (Ty::Fixed(et, _), OVal::List(items)) => items.iter().for_each(|i| enc_typed(et, i, schemas, out)),
        (Ty::Var(et), OVal::List(items)) => {
            out.extend((items.len() as u32).to_le_bytes());
            items.iter().for_each(|i| enc_typed(et, i, schemas, out));
        }
        (Ty::Inline(fs), OVal::Struct(items)) => fs.iter().zip(items).for_each(|((_, ft), i)| enc_typed(ft, i, schemas, out)),
        (Ty::Ref(k), OVal::Struct(items)) => schemas[*k].iter().zip(items).for_each(|((_, ft), i)| enc_typed(ft, i, schemas, out)),
        _ => enc(v, out),
    }
}

impl Case {
    /// Bytes per the layout rules: declaration order, little-endian,
    /// bool as one byte, u32 count before strings and var-lists, fixed
    /// lists without a count, no padding.
    pub fn oracle_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let last = self.schemas.last().unwrap();
        for ((_, t), v) in last.iter().zip(&self.value) {
            enc_typed(t, v, &self.schemas, &mut out);
        }
        out
    }
}

pub fn to_value(v: &OVal) -> Value {
    match v {
        OVal::F64(b) => Value::F64(f64::from_bits(*b)),
        OVal::F32(b) => Value::F32(f32::from_bits(*b)),
        OVal::I64(x) => Value::I64(*x),
        OVal::I32(x) => Value::I32(*x),
        OVal::U8(x) => Value::U8(*x),
        OVal::Bool(b) => Value::Bool(*b),
        OVal::Str(s) => Value::Str(s.clone()),
        OVal::List(items) => Value::List(items.iter().map(to_value).collect()),
        OVal::Struct(items) => Value::Struct(items.iter().map(to_value).collect()),
    }
}

/// Twist bytes built by hand: six little-endian f64 in declaration order.
pub fn twist_bytes(lx: f64, ly: f64, lz: f64, ax: f64, ay: f64, az: f64) -> Vec<u8> {
    [lx, ly, lz, ax, ay, az].iter().flat_map(|v| v.to_le_bytes()).collect()
}
