/** Small DOM builders shared by the views. */

import { NodeInfo, RequestView } from "./api.js";
import { formatElapsed } from "./state.js";

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

export function stateBadge(state: string): HTMLElement {
  return el("span", { class: `badge state-${state}` }, state);
}

/** Three aligned monospace tracks: sequence, H/E/C structure (colored per
 * class), confidence digits. */
export function resultTracks(
  sequence: string,
  structure: string,
  digits: string,
): HTMLElement {
  const structureRow = el("div", { class: "track track-structure" });
  for (const c of structure) {
    structureRow.append(el("span", { class: `cls-${c}` }, c));
  }
  return el(
    "div",
    { class: "result-tracks" },
    el("div", { class: "track track-seq" }, sequence),
    structureRow,
    el("div", { class: "track track-confidence" }, digits),
  );
}

/** Sequence with the offending residue highlighted, for 400 responses. */
export function illegalResidueDetail(
  sequence: string,
  position: number,
  char: string,
): HTMLElement {
  const row = el("div", { class: "track track-error" });
  row.append(sequence.slice(0, position));
  row.append(el("span", { class: "bad-residue" }, char));
  row.append(sequence.slice(position + 1));
  return el(
    "div",
    { class: "inline-error" },
    el("div", {}, `illegal residue '${char}' at position ${position}`),
    row,
  );
}

export function requestRow(
  view: RequestView,
  nowEpochS: number,
  onOpen: (id: string) => void,
): HTMLElement {
  const open = el("a", { class: "request-link", href: `#/result/${view.request_id}` },
    view.request_id);
  open.addEventListener("click", (ev) => {
    ev.preventDefault();
    onOpen(view.request_id);
  });
  return el(
    "tr",
    { class: "request-row", "data-id": view.request_id },
    el("td", {}, open),
    el("td", {}, view.header || "(no header)"),
    el("td", {}, String(view.sequence.length)),
    el("td", {}, stateBadge(view.state)),
    el("td", {}, formatElapsed(view.submitted_at, nowEpochS)),
  );
}

/** One card per executor; the full descriptor appears on hover. */
export function nodeCard(node: NodeInfo): HTMLElement {
  const used = node.slot_count - node.free_slots;
  const card = el(
    "div",
    {
      class: "node-card",
      title:
        `node ${node.node_id}\naddress ${node.address}\n` +
        `slots ${used}/${node.slot_count} busy\n` +
        `joined ${new Date(node.joined_at * 1000).toISOString()}`,
    },
    el("div", { class: "node-id" }, node.node_id),
    el("div", { class: "node-slots" }, `${used}/${node.slot_count} slots busy`),
  );
  return card;
}

export function banner(kind: "error" | "info", text: string): HTMLElement {
  return el("div", { class: `banner ${kind}` }, text);
}
