use std::path::Path;

use crate::control::{DragPair, DragPointSet};
use crate::{Error, Result};

/// One `sx sy tx ty` line per pair; `#` starts a comment, blank lines are
/// ignored. Errors name the 1-based line.
pub fn parse_drag_points(text: &str, width: usize, height: usize, context: &str) -> Result<DragPointSet> {
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = no + 1;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<i64>().map_err(|_| Error::format(context, format!("line {lineno}: {t:?} is not an integer"))))
            .collect::<Result<Vec<_>>>()?;
        let [sx, sy, tx, ty] = vals[..] else {
            return Err(Error::format(context, format!("line {lineno}: expected 4 integers, got {}", vals.len())));
        };
        for (x, y) in [(sx, sy), (tx, ty)] {
            if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
                return Err(Error::format(context, format!("line {lineno}: point ({x}, {y}) outside the {width}x{height} image")));
            }
        }
        pairs.push(DragPair { source: (sx as usize, sy as usize), target: (tx as usize, ty as usize) });
    }
    DragPointSet::new(width, height, pairs)
}

pub fn format_drag_points(points: &DragPointSet) -> String {
    let mut s = format!("# sx sy tx ty ({}x{})\n", points.width, points.height);
    for p in points.pairs() {
        s.push_str(&format!("{} {} {} {}\n", p.source.0, p.source.1, p.target.0, p.target.1));
    }
    s
}

pub fn read_drag_points(path: &Path, width: usize, height: usize) -> Result<DragPointSet> {
    let text = std::fs::read_to_string(path)?;
    parse_drag_points(&text, width, height, &path.display().to_string())
}
