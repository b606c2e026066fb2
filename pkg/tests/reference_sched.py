"""Independent greedy FIFO / most-free-slots replayer used as the
assignment-trace oracle for scheduler tests."""


class ReferenceReplayer:
    """Independent greedy FIFO / most-free-slots simulator: replays the same
    external event log and derives its own assignment trace."""

    def __init__(self):
        self.queue = []
        self.nodes = {}          # node_id -> [slots, free]
        self.running = {}        # task_id -> node_id
        self.assignments = []

    def _drain(self):
        while self.queue and any(free > 0 for _, free in self.nodes.values()):
            task = self.queue[0]
            best = min((nid for nid, (_, free) in self.nodes.items() if free > 0),
                       key=lambda nid: (-self.nodes[nid][1], nid))
            self.queue.pop(0)
            self.nodes[best][1] -= 1
            self.running[task] = best
            self.assignments.append((task, best))

    def submit(self, task):
        self.queue.append(task)
        self._drain()

    def register(self, node_id, slots):
        if node_id in self.nodes:
            self.lose(node_id)
        self.nodes[node_id] = [slots, slots]
        self._drain()

    def finish(self, task):
        node_id = self.running.pop(task)
        self.nodes[node_id][1] += 1
        self._drain()

    def abort_queued(self, task):
        self.queue.remove(task)

    def lose(self, node_id):
        del self.nodes[node_id]
        for task, nid in sorted(self.running.items()):
            if nid == node_id:
                del self.running[task]
                self.queue.append(task)
        self._drain()
