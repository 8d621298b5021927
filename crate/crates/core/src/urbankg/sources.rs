//! Source table suite: reading and writing the input TSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::geometry::{fmt_coord, parse_wkt_polygon, Polygon};
use crate::dataset::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub id: String,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaRow {
    pub id: String,
    pub name: String,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoiRow {
    pub pid: String,
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    pub cate1: String,
    pub cate2: String,
    pub cate3: String,
    pub brand_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrandRow {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteRow {
    pub brand_id: String,
    pub region_id: String,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRow {
    pub from: String,
    pub to: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckinRow {
    pub uid: String,
    pub pid: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClickRow {
    pub pid: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyRow {
    pub cate3: String,
    pub cate2: String,
    pub cate1: String,
}

/// All parsed input tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawSources {
    pub regions: Vec<RegionRow>,
    pub ba: Vec<BaRow>,
    pub pois: Vec<PoiRow>,
    pub brands: Vec<BrandRow>,
    pub brand_relations: Vec<(String, String)>,
    pub sites: Vec<SiteRow>,
    pub flows: Vec<FlowRow>,
    pub checkins: Vec<CheckinRow>,
    pub clicks: Vec<ClickRow>,
    pub taxonomy: Vec<TaxonomyRow>,
}

pub const REGIONS: &str = "regions.tsv";
pub const BA: &str = "ba.tsv";
pub const POIS: &str = "pois.tsv";
pub const BRANDS: &str = "brands.tsv";
pub const BRAND_RELATIONS: &str = "brand_relations.tsv";
pub const SITES: &str = "sites.tsv";
pub const FLOWS: &str = "flows.tsv";
pub const CHECKINS: &str = "checkins.tsv";
pub const CLICKS: &str = "clicks.tsv";
pub const TAXONOMY: &str = "taxonomy.tsv";

struct Table {
    file: PathBuf,
    rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    fn read(dir: &Path, name: &str, min_cols: usize, max_cols: usize) -> Result<Table> {
        let file = dir.join(name);
        let text = fs::read_to_string(&file).map_err(|_| Error::Source { file: file.clone() })?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<String> = line.split('\t').map(|c| c.trim().to_string()).collect();
            if cols.len() < min_cols || cols.len() > max_cols {
                return Err(Error::Parse {
                    file: file.clone(),
                    line: i + 1,
                    msg: format!("expected {min_cols}..={max_cols} columns, found {}", cols.len()),
                });
            }
            rows.push((i + 1, cols));
        }
        Ok(Table { file, rows })
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse { file: self.file.clone(), line, msg: msg.into() }
    }

    fn num<N: FromStr>(&self, line: usize, v: &str, what: &str) -> Result<N> {
        v.parse::<N>().map_err(|_| self.err(line, format!("bad {what} '{v}'")))
    }
}

/// Reads every source table from `dir`.
pub fn load_sources(dir: &Path) -> Result<RawSources> {
    let mut src = RawSources::default();

    let t = Table::read(dir, REGIONS, 2, 2)?;
    for (ln, c) in &t.rows {
        let polygon = parse_wkt_polygon(&c[1]).map_err(|e| t.err(*ln, e.to_string()))?;
        src.regions.push(RegionRow { id: c[0].clone(), polygon });
    }

    let t = Table::read(dir, BA, 4, 4)?;
    for (ln, c) in &t.rows {
        src.ba.push(BaRow {
            id: c[0].clone(),
            name: c[1].clone(),
            lon: t.num(*ln, &c[2], "lon")?,
            lat: t.num(*ln, &c[3], "lat")?,
        });
    }

    let t = Table::read(dir, POIS, 7, 8)?;
    for (ln, c) in &t.rows {
        let brand_name = c.get(7).filter(|s| !s.is_empty()).cloned();
        src.pois.push(PoiRow {
            pid: c[0].clone(),
            name: c[1].clone(),
            lon: t.num(*ln, &c[2], "lon")?,
            lat: t.num(*ln, &c[3], "lat")?,
            cate1: c[4].clone(),
            cate2: c[5].clone(),
            cate3: c[6].clone(),
            brand_name,
        });
    }

    let t = Table::read(dir, BRANDS, 2, 2)?;
    for (_, c) in &t.rows {
        src.brands.push(BrandRow { id: c[0].clone(), name: c[1].clone() });
    }

    let t = Table::read(dir, BRAND_RELATIONS, 2, 2)?;
    for (_, c) in &t.rows {
        src.brand_relations.push((c[0].clone(), c[1].clone()));
    }

    let t = Table::read(dir, SITES, 2, 3)?;
    for (ln, c) in &t.rows {
        let split = match c.get(2).map(String::as_str) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>().map_err(|_| t.err(*ln, format!("bad split '{s}'")))?),
        };
        src.sites.push(SiteRow { brand_id: c[0].clone(), region_id: c[1].clone(), split });
    }

    let t = Table::read(dir, FLOWS, 3, 3)?;
    for (ln, c) in &t.rows {
        src.flows.push(FlowRow { from: c[0].clone(), to: c[1].clone(), count: t.num(*ln, &c[2], "count")? });
    }

    let t = Table::read(dir, CHECKINS, 3, 3)?;
    for (ln, c) in &t.rows {
        src.checkins.push(CheckinRow {
            uid: c[0].clone(),
            pid: c[1].clone(),
            count: t.num(*ln, &c[2], "count")?,
        });
    }

    let t = Table::read(dir, CLICKS, 2, 2)?;
    for (ln, c) in &t.rows {
        src.clicks.push(ClickRow { pid: c[0].clone(), count: t.num(*ln, &c[1], "count")? });
    }

    let t = Table::read(dir, TAXONOMY, 3, 3)?;
    for (_, c) in &t.rows {
        src.taxonomy.push(TaxonomyRow { cate3: c[0].clone(), cate2: c[1].clone(), cate1: c[2].clone() });
    }

    Ok(src)
}

fn write_table(dir: &Path, name: &str, header: &str, body: String) -> Result<()> {
    fs::write(dir.join(name), format!("{header}\n{body}"))?;
    Ok(())
}

/// Writes the table suite; output is a pure function of `src`.
pub fn write_sources(dir: &Path, src: &RawSources) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut b = String::new();
    for r in &src.regions {
        writeln!(b, "{}\t{}", r.id, r.polygon.to_wkt()).unwrap();
    }
    write_table(dir, REGIONS, "region_id\twkt_polygon", b)?;

    let mut b = String::new();
    for r in &src.ba {
        writeln!(b, "{}\t{}\t{}\t{}", r.id, r.name, fmt_coord(r.lon), fmt_coord(r.lat)).unwrap();
    }
    write_table(dir, BA, "ba_id\tname\tlon\tlat", b)?;

    let mut b = String::new();
    for p in &src.pois {
        writeln!(
            b,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.pid,
            p.name,
            fmt_coord(p.lon),
            fmt_coord(p.lat),
            p.cate1,
            p.cate2,
            p.cate3,
            p.brand_name.as_deref().unwrap_or("")
        )
        .unwrap();
    }
    write_table(dir, POIS, "pid\tname\tlon\tlat\tcate1\tcate2\tcate3\tbrand_name", b)?;

    let mut b = String::new();
    for r in &src.brands {
        writeln!(b, "{}\t{}", r.id, r.name).unwrap();
    }
    write_table(dir, BRANDS, "brand_id\tname", b)?;

    let mut b = String::new();
    for (x, y) in &src.brand_relations {
        writeln!(b, "{x}\t{y}").unwrap();
    }
    write_table(dir, BRAND_RELATIONS, "brand_id_a\tbrand_id_b", b)?;

    let with_split = src.sites.iter().any(|s| s.split.is_some());
    let mut b = String::new();
    for s in &src.sites {
        if with_split {
            let sp = s.split.map(|x| x.as_str()).unwrap_or("");
            writeln!(b, "{}\t{}\t{}", s.brand_id, s.region_id, sp).unwrap();
        } else {
            writeln!(b, "{}\t{}", s.brand_id, s.region_id).unwrap();
        }
    }
    let header = if with_split { "brand_id\tregion_id\tsplit" } else { "brand_id\tregion_id" };
    write_table(dir, SITES, header, b)?;

    let mut b = String::new();
    for f in &src.flows {
        writeln!(b, "{}\t{}\t{}", f.from, f.to, f.count).unwrap();
    }
    write_table(dir, FLOWS, "region_from\tregion_to\tcount", b)?;

    let mut b = String::new();
    for c in &src.checkins {
        writeln!(b, "{}\t{}\t{}", c.uid, c.pid, c.count).unwrap();
    }
    write_table(dir, CHECKINS, "uid\tpid\tcount", b)?;

    let mut b = String::new();
    for c in &src.clicks {
        writeln!(b, "{}\t{}", c.pid, c.count).unwrap();
    }
    write_table(dir, CLICKS, "pid\tcount", b)?;

    let mut b = String::new();
    for t in &src.taxonomy {
        writeln!(b, "{}\t{}\t{}", t.cate3, t.cate2, t.cate1).unwrap();
    }
    write_table(dir, TAXONOMY, "cate3\tcate2\tcate1", b)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RawSources {
        let sq = |x: f64| {
            Polygon::new(vec![(x, 0.0), (x + 1.0, 0.0), (x + 1.0, 1.0), (x, 1.0)]).unwrap()
        };
        RawSources {
            regions: (0..4).map(|i| RegionRow { id: format!("r{i}"), polygon: sq(i as f64) }).collect(),
            brands: vec![
                BrandRow { id: "b0".into(), name: "Alpha".into() },
                BrandRow { id: "b1".into(), name: "Beta".into() },
            ],
            pois: (0..6)
                .map(|i| PoiRow {
                    pid: format!("p{i}"),
                    name: format!("store {i}"),
                    lon: i as f64 * 0.5 + 0.25,
                    lat: 0.5,
                    cate1: "Food".into(),
                    cate2: "Fast".into(),
                    cate3: "Burger".into(),
                    brand_name: Some(if i % 2 == 0 { "Alpha" } else { "Beta" }.into()),
                })
                .collect(),
            taxonomy: vec![TaxonomyRow { cate3: "Burger".into(), cate2: "Fast".into(), cate1: "Food".into() }],
            ..Default::default()
        }
    }

    #[test]
    fn minimal_fixture_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_sources(dir.path(), &minimal()).unwrap();
        let back = load_sources(dir.path()).unwrap();
        assert_eq!((back.regions.len(), back.brands.len(), back.pois.len()), (4, 2, 6));
        assert!(back.ba.is_empty());
        assert_eq!(back, minimal());
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_sources(dir.path(), &minimal()).unwrap();
        fs::remove_file(dir.path().join(FLOWS)).unwrap();
        match load_sources(dir.path()) {
            Err(Error::Source { file }) => assert!(file.ends_with(FLOWS)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_sources(dir.path(), &minimal()).unwrap();
        fs::write(dir.path().join(CLICKS), "pid\tcount\np0\t3\np1\tmany\n").unwrap();
        match load_sources(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_ba_file_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        write_sources(dir.path(), &minimal()).unwrap();
        fs::write(dir.path().join(BA), "").unwrap();
        assert!(load_sources(dir.path()).unwrap().ba.is_empty());
    }
}
