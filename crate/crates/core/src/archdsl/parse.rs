use std::collections::HashMap;

use super::{
    Activation, ArchGraph, ConvGeometry, LayerKind, LayerSpec, Padding, ParseError, TensorShape,
    INPUT_ID, KERNEL_CHOICES, STRIDE_CHOICES,
};

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let code = match line.find('#') {
        Some(at) => &line[..at],
        None => line,
    };
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, ch) in code.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(Token { text: &code[s..i], column: s + 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Token { text: &code[s..], column: s + 1 });
    }
    tokens
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, column, message: message.into() }
}

fn valid_id(id: &str) -> bool {
    let mut chars = id.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// `key=value` attributes of one line, with the column of each value.
struct Attrs<'a> {
    line: usize,
    values: HashMap<&'a str, (&'a str, usize)>,
}

impl<'a> Attrs<'a> {
    fn collect(line: usize, tokens: &[Token<'a>], allowed: &[&str]) -> Result<Self, ParseError> {
        let mut values = HashMap::new();
        for tok in tokens {
            let Some((key, value)) = tok.text.split_once('=') else {
                return Err(syntax(line, tok.column, format!("expected key=value, found `{}`", tok.text)));
            };
            if !allowed.contains(&key) {
                return Err(syntax(line, tok.column, format!("unknown attribute `{key}`")));
            }
            if value.is_empty() {
                return Err(syntax(line, tok.column, format!("attribute `{key}` has no value")));
            }
            let value_column = tok.column + key.len() + 1;
            if values.insert(key, (value, value_column)).is_some() {
                return Err(syntax(line, tok.column, format!("attribute `{key}` given twice")));
            }
        }
        Ok(Self { line, values })
    }

    fn raw(&self, key: &str) -> Option<(&'a str, usize)> {
        self.values.get(key).copied()
    }

    fn uint(&self, key: &str) -> Result<Option<usize>, ParseError> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, col)) => match v.parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(syntax(self.line, col, format!("`{key}` expects a positive integer, found `{v}`"))),
            },
        }
    }

    fn required_uint(&self, key: &str, column: usize) -> Result<usize, ParseError> {
        self.uint(key)?
            .ok_or_else(|| syntax(self.line, column, format!("missing required attribute `{key}`")))
    }

    fn choice(&self, key: &str, default: usize, allowed: &[usize]) -> Result<usize, ParseError> {
        let value = self.uint(key)?.unwrap_or(default);
        if !allowed.contains(&value) {
            let col = self.raw(key).map_or(1, |(_, c)| c);
            return Err(syntax(self.line, col, format!("`{key}` must be one of {allowed:?}, found {value}")));
        }
        Ok(value)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool, ParseError> {
        match self.raw(key) {
            None => Ok(default),
            Some(("0", _)) => Ok(false),
            Some(("1", _)) => Ok(true),
            Some((v, col)) => Err(syntax(self.line, col, format!("`{key}` expects 0 or 1, found `{v}`"))),
        }
    }

    fn padding(&self) -> Result<Padding, ParseError> {
        match self.raw("pad") {
            None | Some(("same", _)) => Ok(Padding::Same),
            Some(("valid", _)) => Ok(Padding::Valid),
            Some((v, col)) => Err(syntax(self.line, col, format!("`pad` expects same|valid, found `{v}`"))),
        }
    }

    fn activation(&self, default: Activation) -> Result<Activation, ParseError> {
        match self.raw("act") {
            None => Ok(default),
            Some(("none", _)) => Ok(Activation::None),
            Some(("relu", _)) => Ok(Activation::Relu),
            Some((v, col)) => Err(syntax(self.line, col, format!("`act` expects none|relu, found `{v}`"))),
        }
    }

    fn geometry(&self, column: usize) -> Result<ConvGeometry, ParseError> {
        let kernel = self.required_uint("k", column)?;
        if !KERNEL_CHOICES.contains(&kernel) {
            let col = self.raw("k").map_or(column, |(_, c)| c);
            return Err(syntax(self.line, col, format!("kernel must be one of {KERNEL_CHOICES:?}, found {kernel}")));
        }
        let stride = self.choice("s", 1, &STRIDE_CHOICES)?;
        Ok(ConvGeometry { kernel, stride, padding: self.padding()? })
    }
}

/// Parses `.tdn` source into a structurally validated, not yet
/// shape-inferred graph.
pub fn parse_arch(text: &str) -> Result<ArchGraph, ParseError> {
    let mut nodes: Vec<LayerSpec> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut last_line = 0;

    for (line_idx, raw) in text.lines().enumerate() {
        let line = line_idx + 1;
        last_line = line;
        let tokens = tokenize(raw);
        let Some(head) = tokens.first() else { continue };

        let (id, kind, from) = match head.text {
            "input" => {
                if tokens.len() != 4 {
                    return Err(syntax(line, head.column, "`input` expects exactly H W C"));
                }
                let mut dims = [0usize; 3];
                for (d, tok) in dims.iter_mut().zip(&tokens[1..]) {
                    *d = match tok.text.parse::<usize>() {
                        Ok(v) if v > 0 => v,
                        _ => return Err(syntax(line, tok.column, format!("expected a positive integer, found `{}`", tok.text))),
                    };
                }
                let shape = TensorShape::new(dims[0], dims[1], dims[2]);
                (INPUT_ID.to_string(), LayerKind::Input(shape), None)
            }
            kw @ ("conv" | "dwconv" | "maxpool" | "gap" | "add" | "dense" | "softmax") => {
                let Some(id_tok) = tokens.get(1) else {
                    return Err(syntax(line, head.column + kw.len(), format!("`{kw}` needs a node id")));
                };
                if id_tok.text.contains('=') || !valid_id(id_tok.text) {
                    return Err(syntax(line, id_tok.column, format!("invalid node id `{}`", id_tok.text)));
                }
                let allowed: &[&str] = match kw {
                    "conv" => &["k", "s", "f", "pad", "bn", "act", "bias", "from"],
                    "dwconv" => &["k", "s", "pad", "bn", "act", "bias", "from"],
                    "maxpool" => &["k", "s", "from"],
                    "add" => &["from", "act"],
                    "dense" => &["units", "act", "from"],
                    _ => &["from"],
                };
                let attrs = Attrs::collect(line, &tokens[2..], allowed)?;
                let end_column = tokens.last().map_or(1, |t| t.column + t.text.len());
                let kind = match kw {
                    "conv" => {
                        let geometry = attrs.geometry(end_column)?;
                        let batch_norm = attrs.flag("bn", false)?;
                        LayerKind::Conv {
                            out_channels: attrs.required_uint("f", end_column)?,
                            geometry,
                            bias: attrs.flag("bias", LayerKind::default_bias(batch_norm))?,
                            batch_norm,
                            activation: attrs.activation(Activation::Relu)?,
                        }
                    }
                    "dwconv" => {
                        let geometry = attrs.geometry(end_column)?;
                        let batch_norm = attrs.flag("bn", false)?;
                        LayerKind::DepthwiseConv {
                            geometry,
                            bias: attrs.flag("bias", LayerKind::default_bias(batch_norm))?,
                            batch_norm,
                            activation: attrs.activation(Activation::Relu)?,
                        }
                    }
                    "maxpool" => LayerKind::MaxPool {
                        kernel: attrs.required_uint("k", end_column)?,
                        stride: attrs.uint("s")?.unwrap_or(1),
                    },
                    "gap" => LayerKind::GlobalAvgPool,
                    "add" => LayerKind::Add { activation: attrs.activation(Activation::None)? },
                    "dense" => LayerKind::Dense {
                        units: attrs.required_uint("units", end_column)?,
                        activation: attrs.activation(Activation::None)?,
                    },
                    _ => LayerKind::Softmax,
                };
                if kw == "add" && attrs.raw("from").is_none() {
                    return Err(syntax(line, end_column, "`add` requires from=ID,ID"));
                }
                (id_tok.text.to_string(), kind, attrs.raw("from"))
            }
            other => {
                return Err(ParseError::UnknownLayer { line, column: head.column, kind: other.to_string() })
            }
        };

        let inputs = match (&kind, from) {
            (LayerKind::Input(_), _) => Vec::new(),
            (_, Some((list, col))) => {
                let refs: Vec<&str> = list.split(',').collect();
                if refs.len() != kind.arity() {
                    return Err(syntax(
                        line,
                        col,
                        format!("`{}` takes {} input(s), found {}", kind.keyword(), kind.arity(), refs.len()),
                    ));
                }
                refs.iter()
                    .map(|r| {
                        ids.get(*r).copied().ok_or_else(|| ParseError::UndeclaredId { line, id: r.to_string() })
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
            (_, None) => match nodes.len() {
                0 => {
                    return Err(ParseError::Structure {
                        line,
                        message: format!("`{id}` has no previous node to read from"),
                    })
                }
                n => vec![n - 1],
            },
        };

        if ids.contains_key(&id) {
            return Err(ParseError::DuplicateId { line, id });
        }
        ids.insert(id.clone(), nodes.len());
        nodes.push(LayerSpec { id, kind, inputs });
        lines.push(line);
    }

    if nodes.is_empty() {
        return Err(ParseError::MissingInput { line: last_line.max(1) });
    }
    validate_structure(&nodes, |i| lines[i])?;
    Ok(ArchGraph::from_validated(nodes))
}

/// Structural rules shared by the parser and programmatic construction.
pub(crate) fn validate_structure(
    nodes: &[LayerSpec],
    line_of: impl Fn(usize) -> usize,
) -> Result<(), ParseError> {
    let input_count = nodes.iter().filter(|n| matches!(n.kind, LayerKind::Input(_))).count();
    if input_count == 0 {
        let line = if nodes.is_empty() { 1 } else { line_of(0) };
        return Err(ParseError::MissingInput { line });
    }
    if !matches!(nodes[0].kind, LayerKind::Input(_)) {
        return Err(ParseError::Structure { line: line_of(0), message: "the first node must be the input".into() });
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut consumed = vec![false; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        let line = line_of(i);
        if i > 0 && matches!(node.kind, LayerKind::Input(_)) {
            return Err(ParseError::Structure { line, message: "only one input node is allowed".into() });
        }
        if seen.insert(node.id.as_str(), i).is_some() {
            return Err(ParseError::DuplicateId { line, id: node.id.clone() });
        }
        if node.inputs.len() != node.kind.arity() {
            return Err(ParseError::Structure {
                line,
                message: format!(
                    "`{}` takes {} input(s), found {}",
                    node.kind.keyword(),
                    node.kind.arity(),
                    node.inputs.len()
                ),
            });
        }
        for &p in &node.inputs {
            if p >= i {
                return Err(ParseError::Structure {
                    line,
                    message: format!("`{}` refers to a node declared later", node.id),
                });
            }
            if matches!(nodes[p].kind, LayerKind::Softmax) {
                return Err(ParseError::Structure {
                    line,
                    message: format!("softmax `{}` must be terminal", nodes[p].id),
                });
            }
            consumed[p] = true;
        }
        match &node.kind {
            LayerKind::Input(shape) if shape.elements() == 0 => {
                return Err(ParseError::Structure { line, message: "input dimensions must be positive".into() })
            }
            LayerKind::Conv { out_channels: 0, .. } | LayerKind::Dense { units: 0, .. } => {
                return Err(ParseError::Structure { line, message: "width must be positive".into() })
            }
            LayerKind::Conv { geometry, .. } | LayerKind::DepthwiseConv { geometry, .. }
                if !KERNEL_CHOICES.contains(&geometry.kernel) || !STRIDE_CHOICES.contains(&geometry.stride) =>
            {
                return Err(ParseError::Structure { line, message: "unsupported kernel or stride".into() })
            }
            LayerKind::MaxPool { kernel, stride } if *kernel == 0 || *stride == 0 => {
                return Err(ParseError::Structure { line, message: "pool kernel and stride must be positive".into() })
            }
            _ => {}
        }
    }
    Ok(())
}
