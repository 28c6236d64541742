//! Relation data: CSV ingestion, integer encoding of categorical values,
//! multiplicity truncation with dependency cascades, and FK-induced tuple
//! groups.

use crate::schema::{DatabaseSchema, FkId};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("relation '{relation}': column '{column}' has unknown value '{value}'")]
    UnknownValue {
        relation: String,
        column: String,
        value: String,
    },
    #[error("relation '{relation}': duplicate primary key '{key}'")]
    DuplicatePrimaryKey { relation: String, key: String },
    #[error("relation '{relation}': missing column '{column}'")]
    MissingColumn { relation: String, column: String },
    #[error("relation '{relation}': row {row}: {reason}")]
    MalformedRow {
        relation: String,
        row: usize,
        reason: String,
    },
    #[error("io error reading '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("no data file for relation '{0}'")]
    MissingRelation(String),
}

/// One relation's rows with categorical values encoded as small integers.
///
/// `columns` holds one attribute column per schema attribute, in schema order,
/// possibly followed by latent columns attached during pipeline processing.
#[derive(Debug, Clone)]
pub struct EncodedRelation {
    pub name: String,
    pub attr_names: Vec<String>,
    pub domain_sizes: Vec<usize>,
    pub value_labels: Vec<Option<Vec<String>>>,
    /// Row-major attribute matrix: rows[r * width + a].
    values: Vec<u32>,
    n_rows: usize,
    pub pk_values: Vec<String>,
    /// One column per FK of this relation, in schema declaration order.
    pub fk_columns: Vec<FkColumn>,
}

#[derive(Debug, Clone)]
pub struct FkColumn {
    pub fk: FkId,
    pub column_name: String,
    pub values: Vec<String>,
}

impl EncodedRelation {
    pub fn new_empty(
        name: String,
        attr_names: Vec<String>,
        domain_sizes: Vec<usize>,
        value_labels: Vec<Option<Vec<String>>>,
        fk_columns: Vec<FkColumn>,
    ) -> Self {
        Self {
            name,
            attr_names,
            domain_sizes,
            value_labels,
            values: Vec::new(),
            n_rows: 0,
            pk_values: Vec::new(),
            fk_columns,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn width(&self) -> usize {
        self.domain_sizes.len()
    }

    pub fn value(&self, row: usize, attr: usize) -> u32 {
        self.values[row * self.width() + attr]
    }

    pub fn row(&self, row: usize) -> &[u32] {
        let w = self.width();
        &self.values[row * w..(row + 1) * w]
    }

    pub fn push_row(&mut self, pk: String, attrs: &[u32]) {
        debug_assert_eq!(attrs.len(), self.width());
        self.values.extend_from_slice(attrs);
        self.pk_values.push(pk);
        self.n_rows += 1;
    }

    /// Appends a column (e.g. an attached latent attribute). `values` must
    /// have one entry per row, each below `domain_size`.
    pub fn push_column(&mut self, name: String, domain_size: usize, values: &[u32]) {
        assert_eq!(values.len(), self.n_rows);
        let old_w = self.width();
        let mut new_values = Vec::with_capacity(self.n_rows * (old_w + 1));
        for r in 0..self.n_rows {
            new_values.extend_from_slice(&self.values[r * old_w..(r + 1) * old_w]);
            new_values.push(values[r]);
        }
        self.values = new_values;
        self.attr_names.push(name);
        self.domain_sizes.push(domain_size);
        self.value_labels.push(None);
        debug_assert!(values.iter().all(|&v| (v as usize) < domain_size));
    }

    /// Drops the columns at `cols` (used to strip latent scaffolding before
    /// emitting synthetic data).
    pub fn drop_columns(&mut self, cols: &[usize]) {
        let drop: Vec<bool> = (0..self.width()).map(|i| cols.contains(&i)).collect();
        let old_w = self.width();
        let mut new_values = Vec::with_capacity(self.n_rows * (old_w - cols.len()));
        for r in 0..self.n_rows {
            for a in 0..old_w {
                if !drop[a] {
                    new_values.push(self.values[r * old_w + a]);
                }
            }
        }
        self.values = new_values;
        keep_generic(&mut self.attr_names, &drop);
        keep_generic(&mut self.domain_sizes, &drop);
        keep_generic(&mut self.value_labels, &drop);
    }

    /// New relation containing only the rows where `alive` is true, in the
    /// original order.
    pub fn filtered(&self, alive: &[bool]) -> EncodedRelation {
        let mut out = EncodedRelation::new_empty(
            self.name.clone(),
            self.attr_names.clone(),
            self.domain_sizes.clone(),
            self.value_labels.clone(),
            self.fk_columns
                .iter()
                .map(|c| FkColumn {
                    fk: c.fk,
                    column_name: c.column_name.clone(),
                    values: Vec::new(),
                })
                .collect(),
        );
        for r in 0..self.n_rows {
            if alive[r] {
                out.push_row(self.pk_values[r].clone(), self.row(r));
                for (ci, col) in self.fk_columns.iter().enumerate() {
                    out.fk_columns[ci].values.push(col.values[r].clone());
                }
            }
        }
        out
    }

    pub fn decode(&self, row: usize, attr: usize) -> String {
        let v = self.value(row, attr);
        match &self.value_labels[attr] {
            Some(labels) => labels[v as usize].clone(),
            None => v.to_string(),
        }
    }
}

fn keep_generic<T>(v: &mut Vec<T>, drop: &[bool]) {
    let mut i = 0;
    v.retain(|_| {
        let k = !drop[i];
        i += 1;
        k
    });
}

/// The child rows referring to one parent tuple via a foreign key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleGroup {
    pub parent_row: usize,
    pub parent_pk: String,
    pub member_rows: Vec<usize>,
}

/// A loaded (and possibly truncated) database instance.
#[derive(Debug, Clone)]
pub struct Database {
    pub schema: DatabaseSchema,
    pub relations: Vec<EncodedRelation>,
}

impl Database {
    pub fn relation(&self, idx: usize) -> &EncodedRelation {
        &self.relations[idx]
    }

    pub fn relation_by_name(&self, name: &str) -> Option<&EncodedRelation> {
        let idx = self.schema.relation_index(name)?;
        Some(&self.relations[idx])
    }
}

/// Parses one relation's rows-of-strings into integer codes.
///
/// `header` names the columns; it must contain the primary key, every
/// attribute and every FK column of the relation (extra columns are an error).
pub fn load_relation(
    schema: &DatabaseSchema,
    relation_idx: usize,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<EncodedRelation, DataError> {
    let rel = schema.relation(relation_idx);
    let col_pos = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                relation: rel.name.clone(),
                column: name.to_string(),
            })
    };
    let pk_pos = col_pos(&rel.primary_key_column)?;
    let attr_pos: Vec<usize> = rel
        .attributes
        .iter()
        .map(|a| col_pos(&a.name))
        .collect::<Result<_, _>>()?;
    let fk_ids: Vec<(FkId, &str)> = schema
        .fk_edges()
        .filter(|(id, _)| id.child == relation_idx)
        .map(|(id, def)| (id, def.child_fk_column.as_str()))
        .collect();
    let fk_pos: Vec<usize> = fk_ids
        .iter()
        .map(|(_, col)| col_pos(col))
        .collect::<Result<_, _>>()?;

    let mut out = EncodedRelation::new_empty(
        rel.name.clone(),
        rel.attributes.iter().map(|a| a.name.clone()).collect(),
        rel.attributes.iter().map(|a| a.domain_size).collect(),
        rel.attributes.iter().map(|a| a.value_labels.clone()).collect(),
        fk_ids
            .iter()
            .map(|(id, col)| FkColumn {
                fk: *id,
                column_name: col.to_string(),
                values: Vec::new(),
            })
            .collect(),
    );

    let mut seen_pk: BTreeMap<String, ()> = BTreeMap::new();
    let mut attrs_buf = vec![0u32; rel.attributes.len()];
    for (row_idx, row) in rows.into_iter().enumerate() {
        if row.len() != header.len() {
            return Err(DataError::MalformedRow {
                relation: rel.name.clone(),
                row: row_idx + 1,
                reason: format!("{} fields, header has {}", row.len(), header.len()),
            });
        }
        for (a, attr) in rel.attributes.iter().enumerate() {
            let raw = row[attr_pos[a]].as_str();
            let code = match &attr.value_labels {
                Some(labels) => labels.iter().position(|l| l == raw),
                None => raw
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v < attr.domain_size),
            };
            let code = code.ok_or_else(|| DataError::UnknownValue {
                relation: rel.name.clone(),
                column: attr.name.clone(),
                value: raw.to_string(),
            })?;
            attrs_buf[a] = code as u32;
        }
        let pk = row[pk_pos].clone();
        if seen_pk.insert(pk.clone(), ()).is_some() {
            return Err(DataError::DuplicatePrimaryKey {
                relation: rel.name.clone(),
                key: pk,
            });
        }
        out.push_row(pk, &attrs_buf);
        for (ci, &pos) in fk_pos.iter().enumerate() {
            out.fk_columns[ci].values.push(row[pos].clone());
        }
    }
    Ok(out)
}

/// Loads every relation of `schema` from `<dir>/<relation>.csv`.
pub fn load_database(
    schema: &DatabaseSchema,
    dir: &std::path::Path,
) -> Result<Database, DataError> {
    let mut relations = Vec::new();
    for idx in 0..schema.relations().len() {
        let name = &schema.relation(idx).name;
        let path = dir.join(format!("{name}.csv"));
        if !path.exists() {
            return Err(DataError::MissingRelation(name.clone()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&path)?;
        let header: Vec<String> = reader
            .headers()?
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            rows.push(record.iter().map(|s| s.to_string()).collect());
        }
        relations.push(load_relation(schema, idx, &header, rows)?);
    }
    Ok(Database {
        schema: schema.clone(),
        relations,
    })
}

/// Removes every tuple referred to by more than its FK's multiplicity bound,
/// together with all tuples depending on a removed tuple, iterating until no
/// violation remains. Rows whose FK references a missing parent are removed as
/// dangling. Row order is preserved.
pub fn truncate(db: &Database) -> Database {
    let n_rel = db.relations.len();
    let mut alive: Vec<Vec<bool>> = db
        .relations
        .iter()
        .map(|r| vec![true; r.n_rows()])
        .collect();

    loop {
        let mut changed = false;

        // Remove dangling children (missing or dead parent), cascading.
        loop {
            let mut cascaded = false;
            for (fk, _) in db.schema.fk_edges() {
                let parent_rel = &db.relations[fk.parent];
                let parent_index: BTreeMap<&str, usize> = parent_rel
                    .pk_values
                    .iter()
                    .enumerate()
                    .map(|(i, k)| (k.as_str(), i))
                    .collect();
                let col = db.relations[fk.child]
                    .fk_columns
                    .iter()
                    .position(|c| c.fk == fk)
                    .expect("fk column present");
                let fk_values = &db.relations[fk.child].fk_columns[col].values;
                for row in 0..db.relations[fk.child].n_rows() {
                    if !alive[fk.child][row] {
                        continue;
                    }
                    let live_parent = parent_index
                        .get(fk_values[row].as_str())
                        .map(|&p| alive[fk.parent][p])
                        .unwrap_or(false);
                    if !live_parent {
                        alive[fk.child][row] = false;
                        cascaded = true;
                        changed = true;
                    }
                }
            }
            if !cascaded {
                break;
            }
        }

        // Remove over-referenced parents.
        for (fk, def) in db.schema.fk_edges() {
            let parent_rel = &db.relations[fk.parent];
            let parent_index: BTreeMap<&str, usize> = parent_rel
                .pk_values
                .iter()
                .enumerate()
                .map(|(i, k)| (k.as_str(), i))
                .collect();
            let col = db.relations[fk.child]
                .fk_columns
                .iter()
                .position(|c| c.fk == fk)
                .expect("fk column present");
            let fk_values = &db.relations[fk.child].fk_columns[col].values;
            let mut counts = vec![0usize; parent_rel.n_rows()];
            for row in 0..db.relations[fk.child].n_rows() {
                if !alive[fk.child][row] {
                    continue;
                }
                if let Some(&p) = parent_index.get(fk_values[row].as_str()) {
                    if alive[fk.parent][p] {
                        counts[p] += 1;
                    }
                }
            }
            for (p, &c) in counts.iter().enumerate() {
                if alive[fk.parent][p] && c > def.max_multiplicity {
                    alive[fk.parent][p] = false;
                    changed = true;
                }
            }
        }

        if !changed {
            break;
        }
    }

    let relations = (0..n_rel)
        .map(|i| db.relations[i].filtered(&alive[i]))
        .collect();
    Database {
        schema: db.schema.clone(),
        relations,
    }
}

/// Writes every relation of `db` to `<dir>/<relation>.csv` with the same
/// header convention as ingestion; values are decoded back to labels when the
/// schema defines them.
pub fn write_database(db: &Database, dir: &std::path::Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for (idx, rel) in db.relations.iter().enumerate() {
        let meta = db.schema.relation(idx);
        let path = dir.join(format!("{}.csv", rel.name));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec![meta.primary_key_column.clone()];
        header.extend(rel.attr_names.iter().cloned());
        header.extend(rel.fk_columns.iter().map(|c| c.column_name.clone()));
        w.write_record(&header)?;
        for r in 0..rel.n_rows() {
            let mut record = vec![rel.pk_values[r].clone()];
            for a in 0..rel.width() {
                record.push(rel.decode(r, a));
            }
            for col in &rel.fk_columns {
                record.push(col.values[r].clone());
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

/// Result of grouping a child relation's rows by one foreign key.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub groups: Vec<TupleGroup>,
    /// Child rows whose parent is missing (none after truncation).
    pub dangling_rows: Vec<usize>,
    /// groups index per child row; usize::MAX for dangling rows.
    pub group_of_row: Vec<usize>,
}

/// Partitions the child rows of `fk` into per-parent groups, ordered by parent
/// row order; member order follows child row order. Parents with no children
/// induce no group.
pub fn build_groups(db: &Database, fk: FkId) -> Grouping {
    let child = &db.relations[fk.child];
    let parent = &db.relations[fk.parent];
    let parent_index: BTreeMap<&str, usize> = parent
        .pk_values
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let col = child
        .fk_columns
        .iter()
        .position(|c| c.fk == fk)
        .expect("fk column present");
    let fk_values = &child.fk_columns[col].values;

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut dangling_rows = Vec::new();
    for row in 0..child.n_rows() {
        match parent_index.get(fk_values[row].as_str()) {
            Some(&p) => members.entry(p).or_default().push(row),
            None => dangling_rows.push(row),
        }
    }
    let mut groups = Vec::with_capacity(members.len());
    let mut group_of_row = vec![usize::MAX; child.n_rows()];
    for (parent_row, member_rows) in members {
        for &r in &member_rows {
            group_of_row[r] = groups.len();
        }
        groups.push(TupleGroup {
            parent_row,
            parent_pk: parent.pk_values[parent_row].clone(),
            member_rows,
        });
    }
    Grouping {
        groups,
        dangling_rows,
        group_of_row,
    }
}
