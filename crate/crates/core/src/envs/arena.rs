//! Arena grids: text-map parsing, shipped maps, and geometry queries.
//!
//! Map format, one character per cell:
//!
//! * `#` — wall, default color 0
//! * `1`..`9` — wall with that palette color
//! * `.` — free floor
//! * `A` — agent spawn cell (free)
//! * `T` — fixed target cell (free)
//!
//! Rows must be equal length. Exactly one `A`; at most one `T`.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::HgcpError;
use crate::Result;

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall(u8),
}

/// The four shipped arenas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArenaKind {
    Box5,
    Box9,
    LMaze,
    SMaze,
}

impl ArenaKind {
    pub fn name(self) -> &'static str {
        match self {
            ArenaKind::Box5 => "box5",
            ArenaKind::Box9 => "box9",
            ArenaKind::LMaze => "lmaze",
            ArenaKind::SMaze => "smaze",
        }
    }

    pub fn parse(name: &str) -> Result<ArenaKind> {
        match name {
            "box5" => Ok(ArenaKind::Box5),
            "box9" => Ok(ArenaKind::Box9),
            "lmaze" => Ok(ArenaKind::LMaze),
            "smaze" => Ok(ArenaKind::SMaze),
            other => Err(HgcpError::Config(format!("unknown arena `{other}`"))),
        }
    }

    pub fn all() -> [ArenaKind; 4] {
        [ArenaKind::Box5, ArenaKind::Box9, ArenaKind::LMaze, ArenaKind::SMaze]
    }

    /// Targets relocate on touch in the open boxes; maze targets are fixed.
    pub fn target_respawn(self) -> bool {
        matches!(self, ArenaKind::Box5 | ArenaKind::Box9)
    }

    fn map_text(self) -> &'static str {
        match self {
            ArenaKind::Box5 => BOX5_MAP,
            ArenaKind::Box9 => BOX9_MAP,
            ArenaKind::LMaze => LMAZE_MAP,
            ArenaKind::SMaze => SMAZE_MAP,
        }
    }
}

const BOX5_MAP: &str = "\
1111112
4.....2
4.....2
4..A..2
4.....2
4.....2
4333333
";

const BOX9_MAP: &str = "\
11111111112
4.........2
4.........2
4.........2
4.........2
4....A....2
4.........2
4.........2
4.........2
4.........2
43333333333
";

const LMAZE_MAP: &str = "\
22222222
1A.33333
1..33333
1..33333
1..66666
1......4
1.....T4
55555555
";

const SMAZE_MAP: &str = "\
111111111111
2A.....44444
2......44444
33335..44444
33335..77777
66666......4
66666.....T4
888888888888
";

/// Parsed grid with cached geometry.
#[derive(Debug, Clone)]
pub struct Arena {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    spawn: (usize, usize),
    fixed_target: Option<(usize, usize)>,
    free_cells: Vec<(usize, usize)>,
}

impl Arena {
    /// Parse a text map. `(col, row)` indexing; row 0 is the first line.
    pub fn parse(text: &str) -> Result<Arena> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if lines.is_empty() {
            return Err(HgcpError::Config("empty arena map".into()));
        }
        let width = lines[0].chars().count();
        let height = lines.len();
        let mut cells = Vec::with_capacity(width * height);
        let mut spawn = None;
        let mut fixed_target = None;
        let mut free_cells = Vec::new();
        for (row, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return Err(HgcpError::Parse {
                    line: row + 1,
                    msg: format!("ragged map row: {} cells, expected {width}", line.chars().count()),
                });
            }
            for (col, ch) in line.chars().enumerate() {
                let cell = match ch {
                    '#' => Cell::Wall(0),
                    d @ '1'..='9' => Cell::Wall(d as u8 - b'0'),
                    '.' => Cell::Free,
                    'A' => {
                        if spawn.replace((col, row)).is_some() {
                            return Err(HgcpError::Parse {
                                line: row + 1,
                                msg: "multiple agent spawns".into(),
                            });
                        }
                        Cell::Free
                    }
                    'T' => {
                        if fixed_target.replace((col, row)).is_some() {
                            return Err(HgcpError::Parse {
                                line: row + 1,
                                msg: "multiple fixed targets".into(),
                            });
                        }
                        Cell::Free
                    }
                    other => {
                        return Err(HgcpError::Parse {
                            line: row + 1,
                            msg: format!("unknown map character `{other}`"),
                        })
                    }
                };
                if cell == Cell::Free {
                    free_cells.push((col, row));
                }
                cells.push(cell);
            }
        }
        let spawn = spawn.ok_or_else(|| HgcpError::Config("map has no agent spawn `A`".into()))?;
        Ok(Arena {
            width,
            height,
            cells,
            spawn,
            fixed_target,
            free_cells,
        })
    }

    /// Load a map from a file.
    pub fn load(path: &Path) -> Result<Arena> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HgcpError::Config(format!("cannot read arena {}: {e}", path.display())))?;
        Arena::parse(&text)
    }

    /// One of the four shipped arenas.
    pub fn shipped(kind: ArenaKind) -> Arena {
        Arena::parse(kind.map_text()).expect("shipped maps parse")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Cells outside the grid count as color-0 wall.
    pub fn cell(&self, col: i64, row: i64) -> Cell {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            return Cell::Wall(0);
        }
        self.cells[row as usize * self.width + col as usize]
    }

    pub fn is_wall(&self, col: i64, row: i64) -> bool {
        matches!(self.cell(col, row), Cell::Wall(_))
    }

    /// Free iff the containing cell is free. Positions are in cell units;
    /// cell (c, r) spans [c, c+1) x [r, r+1).
    pub fn is_free_pos(&self, x: f64, y: f64) -> bool {
        !self.is_wall(x.floor() as i64, y.floor() as i64)
    }

    pub fn spawn_cell(&self) -> (usize, usize) {
        self.spawn
    }

    pub fn fixed_target_cell(&self) -> Option<(usize, usize)> {
        self.fixed_target
    }

    pub fn free_cells(&self) -> &[(usize, usize)] {
        &self.free_cells
    }

    /// Number of distinct wall colors on walls a ray can actually hit,
    /// i.e. walls 8-adjacent to at least one free cell.
    pub fn visible_wall_colors(&self) -> usize {
        let mut seen = [false; 10];
        for row in 0..self.height as i64 {
            for col in 0..self.width as i64 {
                let Cell::Wall(color) = self.cell(col, row) else { continue };
                let exposed = (-1..=1).any(|dr| {
                    (-1..=1).any(|dc| {
                        (dr != 0 || dc != 0) && self.cell(col + dc, row + dr) == Cell::Free
                    })
                });
                if exposed {
                    seen[color as usize] = true;
                }
            }
        }
        seen.iter().filter(|s| **s).count()
    }

    /// Interior corners: 2x2 blocks containing exactly three free cells.
    /// An open rectangle has none; each corridor elbow contributes one.
    pub fn interior_corners(&self) -> usize {
        let mut n = 0;
        for row in 0..self.height as i64 - 1 {
            for col in 0..self.width as i64 - 1 {
                let free = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .filter(|(dc, dr)| self.cell(col + dc, row + dr) == Cell::Free)
                    .count();
                if free == 3 {
                    n += 1;
                }
            }
        }
        n
    }

    /// The free cell with maximum BFS distance (4-connected) from the
    /// spawn; ties broken by scan order. This is where fixed targets live.
    pub fn furthest_free_cell(&self) -> (usize, usize) {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let start = self.spawn;
        dist[start.1 * self.width + start.0] = 0;
        let mut queue = VecDeque::from([start]);
        let mut best = (start, 0usize);
        while let Some((c, r)) = queue.pop_front() {
            let d = dist[r * self.width + c];
            if d > best.1 {
                best = ((c, r), d);
            }
            for (dc, dr) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                if self.cell(nc, nr) != Cell::Free {
                    continue;
                }
                let idx = nr as usize * self.width + nc as usize;
                if dist[idx] == usize::MAX {
                    dist[idx] = d + 1;
                    queue.push_back((nc as usize, nr as usize));
                }
            }
        }
        best.0
    }
}
