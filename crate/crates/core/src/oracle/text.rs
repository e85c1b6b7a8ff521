//! Plain-text serialization of tabular instances: a header, one line per
//! (state, action) pair with its successor, and an optional exogenous-chain
//! matrix block. Used to persist falsification witnesses.

use super::{OracleError, TabularExBmdp};

/// Renders an instance in the adjacency text format.
pub fn mdp_to_text(mdp: &TabularExBmdp) -> String {
    let mut out = format!("endo {} {}\n", mdp.n_endo(), mdp.n_actions());
    for s in 0..mdp.n_endo() {
        for a in 0..mdp.n_actions() {
            out.push_str(&format!("{} {} {}\n", s, a, mdp.next(s, a)));
        }
    }
    if let Some(chain) = mdp.exo_chain() {
        out.push_str(&format!("exo {}\n", chain.len()));
        for row in chain {
            let rendered: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            out.push_str(&rendered.join(" "));
            out.push('\n');
        }
    }
    out
}

/// Parses the adjacency text format.
pub fn mdp_from_text(text: &str) -> Result<TabularExBmdp, OracleError> {
    let err = |line: usize, msg: &str| OracleError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (line_no, header) = lines.next().ok_or_else(|| err(1, "empty input"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "endo" {
        return Err(err(line_no, "expected header `endo <n_states> <n_actions>`"));
    }
    let n: usize = parts[1].parse().map_err(|_| err(line_no, "bad state count"))?;
    let n_actions: usize = parts[2]
        .parse()
        .map_err(|_| err(line_no, "bad action count"))?;

    let mut table = vec![usize::MAX; n * n_actions];
    for _ in 0..n * n_actions {
        let (line_no, line) = lines
            .next()
            .ok_or_else(|| err(0, "missing transition lines"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(line_no, "expected `<state> <action> <next>`"));
        }
        let s: usize = fields[0].parse().map_err(|_| err(line_no, "bad state"))?;
        let a: usize = fields[1].parse().map_err(|_| err(line_no, "bad action"))?;
        let next: usize = fields[2].parse().map_err(|_| err(line_no, "bad successor"))?;
        if s >= n || a >= n_actions || next >= n {
            return Err(err(line_no, "index out of range"));
        }
        table[s * n_actions + a] = next;
    }
    if table.iter().any(|&t| t == usize::MAX) {
        return Err(err(0, "transition table is not total"));
    }

    let exo = match lines.next() {
        None => None,
        Some((line_no, line)) => {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 || parts[0] != "exo" {
                return Err(err(line_no, "expected `exo <n_exo>`"));
            }
            let n_exo: usize = parts[1].parse().map_err(|_| err(line_no, "bad exo count"))?;
            let mut chain = Vec::with_capacity(n_exo);
            for _ in 0..n_exo {
                let (line_no, line) = lines.next().ok_or_else(|| err(0, "missing exo rows"))?;
                let row: Result<Vec<f64>, _> =
                    line.split_whitespace().map(str::parse::<f64>).collect();
                let row = row.map_err(|_| err(line_no, "bad probability"))?;
                if row.len() != n_exo {
                    return Err(err(line_no, "exo row has wrong width"));
                }
                chain.push(row);
            }
            Some(chain)
        }
    };
    TabularExBmdp::new(n, n_actions, table, exo)
}
