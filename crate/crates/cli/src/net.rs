use anyhow::{bail, Context, Result};
use clap::Args;
use gello_core::protocol::{Publisher, Subscriber, Topology};

/// Where a node listens and whom it publishes to.
#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    /// Address to accept subscriptions on, e.g. 0.0.0.0:5556.
    #[arg(long)]
    pub listen: Option<String>,
    /// Comma-separated addresses this node publishes to.
    #[arg(long, value_delimiter = ',')]
    pub peers: Vec<String>,
    /// Topology file naming every node's listen address and peers.
    #[arg(long, requires = "name", conflicts_with_all = ["listen", "peers"])]
    pub topology: Option<String>,
    /// This node's entry in the topology file.
    #[arg(long, requires = "topology")]
    pub name: Option<String>,
}

impl NetArgs {
    pub fn resolve(&self) -> Result<(Option<String>, Vec<String>)> {
        match (&self.topology, &self.name) {
            (Some(path), Some(name)) => {
                let topo = Topology::load(path).with_context(|| format!("loading topology {path}"))?;
                let listen = topo.node(name)?.listen.clone();
                Ok((Some(listen), topo.peer_addrs(name)?))
            }
            _ => Ok((self.listen.clone(), self.peers.clone())),
        }
    }

    pub fn publisher(&self, node_id: u8) -> Result<Publisher> {
        let (_, peers) = self.resolve()?;
        let mut publisher = Publisher::new(node_id);
        for p in &peers {
            publisher.connect(p).with_context(|| format!("peer {p}"))?;
        }
        Ok(publisher)
    }

    pub fn subscriber(&self) -> Result<Subscriber> {
        let (listen, _) = self.resolve()?;
        let Some(addr) = listen else {
            bail!("this node needs --listen or --topology/--name");
        };
        let sub = Subscriber::bind(&addr).with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {}", sub.local_addr().map_or(addr, |a| a.to_string()));
        Ok(sub)
    }
}
