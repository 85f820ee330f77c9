//! City registry, great-circle distances, and the threshold graph over
//! cities.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// One city with its position in decimal degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct City {
    pub id: usize,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

/// Ordered city registry. Ids are unique and contiguous from zero and
/// the order fixes the row/column layout of every matrix in the toolkit.
#[derive(Clone, Debug, PartialEq)]
pub struct CitySet {
    cities: Vec<City>,
}

impl CitySet {
    pub fn new(cities: Vec<City>) -> Result<Self> {
        if cities.len() < 2 {
            return Err(Error::InvalidCitySet {
                reason: format!("need at least 2 cities, got {}", cities.len()),
            });
        }
        for (i, c) in cities.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidCitySet {
                    reason: format!("ids must be contiguous from 0; position {i} has id {}", c.id),
                });
            }
            validate_coordinate(c.lat, c.lon)?;
        }
        Ok(CitySet { cities })
    }

    pub fn len(&self) -> usize {
        self.cities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cities.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&City> {
        self.cities.get(id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, City> {
        self.cities.iter()
    }

    /// Reads the `id,name,lat,lon` CSV schema.
    pub fn from_csv_reader<R: Read>(reader: R, path: &str) -> Result<Self> {
        let mut cities = Vec::new();
        let mut lines = BufReader::new(reader).lines().enumerate();
        match lines.next() {
            Some((_, line)) => {
                let header = line?;
                if header.trim() != "id,name,lat,lon" {
                    return Err(Error::Parse {
                        path: path.to_string(),
                        line: 1,
                        reason: format!("expected header `id,name,lat,lon`, got `{header}`"),
                    });
                }
            }
            None => return Err(Error::EmptyInput { what: "cities csv" }),
        }
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    reason: format!("expected 4 fields, got {}", parts.len()),
                });
            }
            let field = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    reason: format!("bad {what} `{s}`"),
                })
            };
            let id = parts[0].trim().parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                reason: format!("bad id `{}`", parts[0]),
            })?;
            cities.push(City {
                id,
                name: parts[1].trim().to_string(),
                lat: field(parts[2], "latitude")?,
                lon: field(parts[3], "longitude")?,
            });
        }
        CitySet::new(cities)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id,name,lat,lon")?;
        for c in &self.cities {
            writeln!(w, "{},{},{:?},{:?}", c.id, c.name, c.lat, c.lon)?;
        }
        Ok(())
    }
}

fn validate_coordinate(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) || !lat.is_finite() || !lon.is_finite() {
        return Err(Error::CoordinateOutOfRange { lat, lon });
    }
    Ok(())
}

/// Great-circle distance in kilometers between two `(lat, lon)` points
/// in decimal degrees.
///
/// Absolute coordinate differences feed the half-angle sines, so the
/// result is bit-identical under argument swap.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    validate_coordinate(a.0, a.1)?;
    validate_coordinate(b.0, b.1)?;
    let lat1 = a.0.to_radians();
    let lat2 = b.0.to_radians();
    let dlat = (a.0 - b.0).abs().to_radians();
    let dlon = (a.1 - b.1).abs().to_radians();
    let s1 = (dlat / 2.0).sin();
    let s2 = (dlon / 2.0).sin();
    let h = s1 * s1 + lat1.cos() * lat2.cos() * s2 * s2;
    Ok(2.0 * EARTH_RADIUS_KM * h.min(1.0).sqrt().asin())
}

/// Symmetric pairwise distance matrix in kilometers with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    matrix: Tensor,
}

impl DistanceMatrix {
    pub fn from_cities(cities: &CitySet) -> Result<Self> {
        let n = cities.len();
        let mut m = Tensor::zeros(n, n);
        for u in 0..n {
            let cu = cities.get(u).unwrap();
            for v in (u + 1)..n {
                let cv = cities.get(v).unwrap();
                let d = haversine_km((cu.lat, cu.lon), (cv.lat, cv.lon))?;
                m.set(u, v, d);
                m.set(v, u, d);
            }
        }
        Ok(DistanceMatrix { matrix: m })
    }

    pub fn order(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.matrix.get(u, v)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.matrix
    }
}

/// Threshold graph over cities: an undirected edge joins `u != v`
/// whenever their distance is at most `epsilon_km` (inclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct GeographyGraph {
    pub epsilon_km: f64,
    adjacency: Tensor,
    neighbors: Vec<Vec<usize>>,
    degrees: Vec<usize>,
}

impl GeographyGraph {
    pub fn build(cities: &CitySet, epsilon_km: f64) -> Result<Self> {
        let distances = DistanceMatrix::from_cities(cities)?;
        Self::from_distances(&distances, epsilon_km)
    }

    pub fn from_distances(distances: &DistanceMatrix, epsilon_km: f64) -> Result<Self> {
        if epsilon_km.is_nan() || epsilon_km < 0.0 {
            return Err(Error::InvalidConfig {
                reason: format!("epsilon_km must be >= 0, got {epsilon_km}"),
            });
        }
        let n = distances.order();
        let mut adjacency = Tensor::zeros(n, n);
        let mut neighbors = vec![Vec::new(); n];
        for (u, nbrs) in neighbors.iter_mut().enumerate() {
            for v in 0..n {
                if u != v && distances.get(u, v) <= epsilon_km {
                    adjacency.set(u, v, 1.0);
                    nbrs.push(v);
                }
            }
        }
        let degrees = neighbors.iter().map(Vec::len).collect();
        Ok(GeographyGraph {
            epsilon_km,
            adjacency,
            neighbors,
            degrees,
        })
    }

    pub fn order(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency.get(u, v) != 0.0
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.degrees[u]
    }

    pub fn edge_count(&self) -> usize {
        self.degrees.iter().sum::<usize>() / 2
    }
}
