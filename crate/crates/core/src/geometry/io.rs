use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Point2, ReferencePath, Sample, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    case_id: String,
    agent_id: String,
    t: f64,
    x: f64,
    y: f64,
    v: f64,
}

/// Writes trajectories as `case_id,agent_id,t,x,y,v` rows.
pub fn write_trajectories_csv<'a, W, I>(writer: W, rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Trajectory)>,
{
    let mut w = csv::Writer::from_writer(writer);
    for (case_id, traj) in rows {
        for s in traj.samples() {
            w.serialize(TrajectoryRow {
                case_id: case_id.to_string(),
                agent_id: traj.agent_id().to_string(),
                t: s.t,
                x: s.pos.x,
                y: s.pos.y,
                v: s.v,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `case_id,agent_id,t,x,y,v` rows, grouping consecutive rows with the
/// same case and agent into one trajectory.
pub fn read_trajectories_csv<R: Read>(reader: R) -> Result<Vec<(String, Trajectory)>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out: Vec<(String, String, Vec<Sample>)> = Vec::new();
    for row in r.deserialize() {
        let row: TrajectoryRow = row?;
        let sample = Sample::new(row.t, row.x, row.y, row.v);
        match out.last_mut() {
            Some((case, agent, samples)) if *case == row.case_id && *agent == row.agent_id => samples.push(sample),
            _ => out.push((row.case_id, row.agent_id, vec![sample])),
        }
    }
    out.into_iter().map(|(case, agent, samples)| Ok((case, Trajectory::new(agent, samples)?))).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PathRecord {
    id: String,
    entry_branch: u8,
    exit_branch: u8,
    points: Vec<[f64; 2]>,
}

impl From<&ReferencePath> for PathRecord {
    fn from(p: &ReferencePath) -> Self {
        PathRecord {
            id: p.id.clone(),
            entry_branch: p.entry_branch,
            exit_branch: p.exit_branch,
            points: p.polyline.iter().map(|q| [q.x, q.y]).collect(),
        }
    }
}

impl Serialize for ReferencePath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PathRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ReferencePath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = PathRecord::deserialize(d)?;
        let points = rec.points.iter().map(|&[x, y]| Point2::new(x, y)).collect();
        ReferencePath::new(rec.id, rec.entry_branch, rec.exit_branch, points).map_err(serde::de::Error::custom)
    }
}

pub fn write_paths_json<W: Write>(writer: W, paths: &[ReferencePath]) -> Result<()> {
    serde_json::to_writer_pretty(writer, paths)?;
    Ok(())
}

pub fn read_paths_json<R: Read>(reader: R) -> Result<Vec<ReferencePath>> {
    let paths: Vec<ReferencePath> = serde_json::from_reader(reader)?;
    if paths.is_empty() {
        return Err(Error::Dataset("reference path file is empty".into()));
    }
    Ok(paths)
}
