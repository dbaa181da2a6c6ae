use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ResourceId, SimResource};
use crate::scheduler::{ResourceStatus, ResourceView};

/// Directory record of one registered resource with its live state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub resource: SimResource,
    pub load: f64,
    pub queue_length: u32,
    pub status: ResourceStatus,
}

impl DirectoryEntry {
    pub fn view(&self, user: &str) -> ResourceView {
        let r = &self.resource;
        ResourceView {
            id: r.id.clone(),
            authorized: r.allows(user),
            capability: r.capability,
            slots: r.slots,
            queue_type: r.queue_type,
            queue_length: self.queue_length,
            load: self.load,
            reliability: r.reliability(),
            bandwidth_mbps: r.bandwidth_mbps,
            schedule: r.schedule.clone(),
            status: self.status,
        }
    }
}

/// The information service: which resources exist and their current state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Directory {
    entries: BTreeMap<ResourceId, DirectoryEntry>,
}

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, resource: SimResource) {
        let entry = DirectoryEntry {
            load: resource.initial_load,
            queue_length: resource.background_queue,
            status: ResourceStatus::Up,
            resource,
        };
        self.entries.insert(entry.resource.id.clone(), entry);
    }

    pub fn deregister(&mut self, id: &ResourceId) -> Option<DirectoryEntry> {
        self.entries.remove(id)
    }

    pub fn get(&self, id: &ResourceId) -> Option<&DirectoryEntry> {
        self.entries.get(id)
    }

    pub fn get_mut(&mut self, id: &ResourceId) -> Option<&mut DirectoryEntry> {
        self.entries.get_mut(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DirectoryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registered resources `user` may use, in id order. Down resources are
    /// included with their status.
    pub fn authorized_views(&self, user: &str) -> Vec<ResourceView> {
        self.entries.values().filter(|e| e.resource.allows(user)).map(|e| e.view(user)).collect()
    }
}
