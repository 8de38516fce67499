use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use crate::decision::DecisionMakerHandle;
use crate::lower::{Variant, VariantId, VariantTable};
use crate::syntax::Lambda;

#[derive(Clone, Debug)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(Rc<str>),
    List(Rc<RefCell<Vec<Value>>>),
    Function(Rc<Closure>),
    Object(ObjectRef),
    DecisionMaker(DecisionMakerHandle),
}

impl Value {
    pub fn str(s: &str) -> Value {
        Value::Str(Rc::from(s))
    }

    pub fn list(items: Vec<Value>) -> Value {
        Value::List(Rc::new(RefCell::new(items)))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Function(_) => "function",
            Value::Object(_) => "object",
            Value::DecisionMaker(_) => "decision-maker",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl PartialEq for Value {
    /// Numbers compare across int/float; containers by content; objects,
    /// functions and decision-makers by identity.
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => a == b,
            (Value::Int(a), Value::Float(b)) | (Value::Float(b), Value::Int(a)) => (*a as f64) == *b,
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::List(a), Value::List(b)) => Rc::ptr_eq(a, b) || *a.borrow() == *b.borrow(),
            (Value::Function(a), Value::Function(b)) => Rc::ptr_eq(a, b),
            (Value::Object(a), Value::Object(b)) => Rc::ptr_eq(a, b),
            (Value::DecisionMaker(a), Value::DecisionMaker(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("null"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Str(s) => f.write_str(s),
            Value::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.borrow().iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            Value::Function(c) => write!(f, "<function/{}>", c.lambda.arity()),
            Value::Object(o) => write!(f, "<DynamicObject#{}>", o.borrow().id),
            Value::DecisionMaker(dm) => write!(f, "<decision-maker {}#{}>", dm.name(), dm.id()),
        }
    }
}

/// A lexical scope. Lookups walk the parent chain.
#[derive(Debug, Default)]
pub struct Scope {
    vars: RefCell<HashMap<String, Value>>,
    parent: Option<Env>,
}

pub type Env = Rc<Scope>;

impl Scope {
    pub fn child(parent: Option<&Env>) -> Env {
        Rc::new(Scope { vars: RefCell::default(), parent: parent.cloned() })
    }

    pub fn define(&self, name: &str, value: Value) {
        self.vars.borrow_mut().insert(name.to_string(), value);
    }

    pub fn lookup(&self, name: &str) -> Option<Value> {
        let mut scope = self;
        loop {
            if let Some(v) = scope.vars.borrow().get(name) {
                return Some(v.clone());
            }
            scope = scope.parent.as_deref()?;
        }
    }

    /// Updates an existing binding; false when `name` is unbound.
    pub fn assign(&self, name: &str, value: Value) -> bool {
        let mut scope = self;
        loop {
            if let Some(slot) = scope.vars.borrow_mut().get_mut(name) {
                *slot = value;
                return true;
            }
            match scope.parent.as_deref() {
                Some(parent) => scope = parent,
                None => return false,
            }
        }
    }
}

#[derive(Debug)]
pub struct Closure {
    pub lambda: Rc<Lambda>,
    pub env: Option<Env>,
}

/// One executable element of a composition chain.
#[derive(Clone, Debug)]
pub struct ChainLink {
    pub variant: Rc<Variant>,
    pub env: Option<Env>,
}

/// Methods of one name on a dynamic object, with each variant's captured
/// environment.
#[derive(Clone, Debug)]
pub struct MethodTable {
    pub table: VariantTable,
    pub envs: HashMap<VariantId, Option<Env>>,
}

impl MethodTable {
    pub fn link(&self, variant: &Rc<Variant>) -> ChainLink {
        ChainLink { variant: variant.clone(), env: self.envs.get(&variant.id).cloned().flatten() }
    }
}

pub type ObjectRef = Rc<RefCell<DynObject>>;

#[derive(Debug)]
pub struct DynObject {
    pub id: u64,
    pub methods: BTreeMap<String, MethodTable>,
    pub decision_maker: Option<DecisionMakerHandle>,
    /// Narrows the module's contexts for calls on this object.
    pub contexts_override: Option<Vec<String>>,
    pub properties: BTreeMap<String, Value>,
    /// Bumped whenever a method is defined.
    pub version: u64,
}

impl DynObject {
    pub fn new(id: u64) -> Self {
        DynObject {
            id,
            methods: BTreeMap::new(),
            decision_maker: None,
            contexts_override: None,
            properties: BTreeMap::new(),
            version: 0,
        }
    }
}
