/** The console's three user-facing views plus login. Each view renders into
 * a container and talks to the portal only through PortalApi. */

import { ApiError, PortalApi, QueueStats } from "./api.js";
import {
  banner,
  el,
  illegalResidueDetail,
  nodeCard,
  requestRow,
  resultTracks,
  stateBadge,
} from "./render.js";
import { subscribeStats, StatsSubscription } from "./sse.js";
import { rememberAnonToken, saveSession, Session, StatsWindow } from "./state.js";

export interface Ctx {
  api: PortalApi;
  session: Session;
  navigate: (hash: string) => void;
  /** injected clock so tests control time; epoch seconds */
  now: () => number;
  /** polling interval for request-state badges */
  refreshMs: number;
}

export interface View {
  /** release timers/streams when the router swaps views */
  destroy(): void;
}

function authDetail(ctx: Ctx, err: unknown): HTMLElement {
  if (err instanceof ApiError && (err.status === 401 || err.status === 403)) {
    const box = el(
      "div",
      { class: "login-prompt" },
      banner("error", err.status === 401 ? "session required" : "not authorized"),
      el("p", {}, "Sign in with an authorized account to continue."),
    );
    const link = el("a", { href: "#/login" }, "Go to login");
    link.addEventListener("click", (ev) => {
      ev.preventDefault();
      ctx.navigate("#/login");
    });
    box.append(link);
    return box;
  }
  const message = err instanceof Error ? err.message : String(err);
  return banner("error", message);
}

// ---------------------------------------------------------------------------
// submit

export function submitView(root: HTMLElement, ctx: Ctx): View {
  const fasta = el("textarea", {
    class: "fasta-input",
    rows: "10",
    placeholder: ">header\nSEQUENCE...",
  });
  const email = el("input", { class: "notify-email", type: "email",
                              placeholder: "notify email (optional)" });
  const file = el("input", { class: "fasta-file", type: "file" });
  file.addEventListener("change", async () => {
    const picked = file.files?.[0];
    if (picked) fasta.value = await picked.text();
  });
  const button = el("button", { class: "submit-button" }, "Submit prediction request");
  const feedback = el("div", { class: "submit-feedback" });
  const results = el("div", { class: "submit-results" });

  let timers: ReturnType<typeof setInterval>[] = [];

  button.addEventListener("click", async () => {
    feedback.replaceChildren();
    results.replaceChildren();
    try {
      const reply = await ctx.api.submit(fasta.value, email.value);
      if (reply.token) {
        rememberAnonToken(ctx.session, reply.request_ids, reply.token);
      }
      const list = el("ul", { class: "submitted-ids" });
      for (const id of reply.request_ids) {
        let badge = stateBadge("pending");
        list.append(el("li", { "data-id": id }, el("code", {}, id), " ", badge));
        const timer = setInterval(async () => {
          try {
            const view = await ctx.api.getRequest(id, ctx.session.anonTokens[id] ?? "");
            const next = stateBadge(view.state);
            badge.replaceWith(next);
            badge = next;
            if (view.state === "completed" || view.state === "failed") {
              clearInterval(timer);
            }
          } catch {
            /* transient; keep polling */
          }
        }, ctx.refreshMs);
        timers.push(timer);
      }
      results.append(
        banner("info", `${reply.request_ids.length} request(s) accepted`), list);
    } catch (err) {
      if (err instanceof ApiError && err.code === "IllegalResidue") {
        const record = fasta.value
          .split(/^>/m)
          .filter((s) => s.trim())[Number(err.payload["record"] ?? 0)];
        const seq = (record ?? "").split("\n").slice(1).join("").replace(/\s/g, "")
          .toUpperCase();
        feedback.append(illegalResidueDetail(
          seq, Number(err.payload["position"]), String(err.payload["char"])));
      } else {
        feedback.append(authDetail(ctx, err));
      }
    }
  });

  root.replaceChildren(
    el("h2", {}, "Submit prediction request"),
    fasta, el("div", {}, file), email, button, feedback, results,
  );
  return {
    destroy() {
      for (const t of timers) clearInterval(t);
      timers = [];
    },
  };
}

// ---------------------------------------------------------------------------
// history + result

export function historyView(root: HTMLElement, ctx: Ctx): View {
  const table = el("table", { class: "history-table" });
  const status = el("div", { class: "history-status" });

  const refresh = async () => {
    try {
      const requests = await ctx.api.history();
      const body = el("tbody", {});
      for (const view of requests) {
        body.append(requestRow(view, ctx.now(), (id) => ctx.navigate(`#/result/${id}`)));
      }
      table.replaceChildren(
        el("thead", {}, el("tr", {},
          el("th", {}, "id"), el("th", {}, "header"), el("th", {}, "length"),
          el("th", {}, "state"), el("th", {}, "age"))),
        body,
      );
      status.replaceChildren(
        requests.length ? "" : banner("info", "no requests yet"));
    } catch (err) {
      status.replaceChildren(authDetail(ctx, err));
    }
  };
  void refresh();
  const timer = setInterval(refresh, ctx.refreshMs);

  root.replaceChildren(el("h2", {}, "Prediction history"), status, table);
  return {
    destroy() {
      clearInterval(timer);
    },
  };
}

export function resultView(root: HTMLElement, ctx: Ctx, id: string): View {
  const box = el("div", { class: "result-box" });
  let timer: ReturnType<typeof setInterval> | null = null;

  const refresh = async () => {
    try {
      const view = await ctx.api.getRequest(id, ctx.session.anonTokens[id] ?? "");
      const parts: (Node | string)[] = [
        el("h2", {}, `Request ${view.request_id}`),
        el("div", {}, stateBadge(view.state), ` header: ${view.header}`),
      ];
      if (view.state === "completed" && view.result) {
        parts.push(resultTracks(view.sequence, view.result.structure,
                                view.result.confidence_digits));
        if (timer !== null) clearInterval(timer);
      } else if (view.state === "failed") {
        const logLink = el("a", {
          class: "log-link",
          href: `${ctx.api.base}/api/requests/${view.request_id}/log`,
        }, view.log_name);
        parts.push(
          banner("error", `failed: ${view.failure_reason ?? "unknown"}`),
          el("div", {}, "per-task log: ", logLink),
        );
        if (timer !== null) clearInterval(timer);
      } else {
        parts.push(banner("info", "still running; this page refreshes itself"));
      }
      box.replaceChildren(...parts);
    } catch (err) {
      box.replaceChildren(authDetail(ctx, err));
      if (err instanceof ApiError && timer !== null) clearInterval(timer);
    }
  };
  void refresh();
  timer = setInterval(refresh, ctx.refreshMs);

  root.replaceChildren(box);
  return {
    destroy() {
      if (timer !== null) clearInterval(timer);
    },
  };
}

// ---------------------------------------------------------------------------
// admin monitor

export function adminView(root: HTMLElement, ctx: Ctx): View {
  const nodesBox = el("div", { class: "node-cards" });
  const statsBox = el("div", { class: "stats-counters" });
  const chart = el("div", { class: "stats-chart" });
  const problems = el("div", { class: "admin-problems" });
  const window = new StatsWindow();
  let subscription: StatsSubscription | null = null;

  const renderStats = (stats: QueueStats) => {
    if (stats.error) {
      problems.replaceChildren(banner("error", "grid unreachable"));
      return;
    }
    problems.replaceChildren();
    window.push(stats);
    // counters are the latest snapshot verbatim, never computed client-side
    statsBox.replaceChildren(
      el("span", { class: "counter waiting" }, `waiting ${stats.waiting}`),
      el("span", { class: "counter running" }, `running ${stats.running}`),
      el("span", { class: "counter finished" }, `finished ${stats.finished}`),
    );
    const max = window.maxTotal();
    const columns = el("div", { class: "chart-columns" });
    for (const snap of window.snapshots) {
      const col = el("div", { class: "chart-col" });
      for (const [name, value] of [
        ["waiting", snap.waiting],
        ["running", snap.running],
        ["finished", snap.finished],
      ] as const) {
        const bar = el("div", { class: `chart-bar ${name}` });
        bar.style.height = `${Math.round((100 * value) / max)}%`;
        bar.title = `${name} ${value}`;
        col.append(bar);
      }
      columns.append(col);
    }
    chart.replaceChildren(columns);
  };

  const refreshNodes = async () => {
    try {
      const nodes = await ctx.api.adminNodes();
      nodesBox.replaceChildren(...nodes.map(nodeCard));
      const stale = problems.querySelector(".banner.error");
      if (stale) problems.replaceChildren();
    } catch (err) {
      if (err instanceof ApiError && err.status === 502) {
        problems.replaceChildren(banner("error", "grid unreachable"));
      } else {
        root.replaceChildren(authDetail(ctx, err));
        destroy();
      }
    }
  };

  const destroy = () => {
    if (subscription) subscription.close();
    subscription = null;
    clearInterval(nodeTimer);
  };

  subscription = subscribeStats(ctx.api, renderStats, (err) => {
    if (err instanceof ApiError && (err.status === 401 || err.status === 403)) {
      root.replaceChildren(authDetail(ctx, err));
      destroy();
    } else if (err instanceof ApiError && err.status === 502) {
      problems.replaceChildren(banner("error", "grid unreachable"));
    }
  });
  void refreshNodes();
  const nodeTimer = setInterval(refreshNodes, ctx.refreshMs);

  root.replaceChildren(
    el("h2", {}, "Grid monitor"),
    problems,
    el("h3", {}, "Executors"), nodesBox,
    el("h3", {}, "Task queues"), statsBox, chart,
  );
  return { destroy };
}

// ---------------------------------------------------------------------------
// login / register

export function loginView(root: HTMLElement, ctx: Ctx): View {
  const email = el("input", { class: "login-email", type: "email", placeholder: "email" });
  const password = el("input", { class: "login-password", type: "password",
                                 placeholder: "password" });
  const name = el("input", { class: "register-name", placeholder: "name (register only)" });
  const feedback = el("div", { class: "login-feedback" });

  const doLogin = async () => {
    try {
      const reply = await ctx.api.login(email.value, password.value);
      ctx.api.token = reply.token;
      ctx.session.token = reply.token;
      ctx.session.role = reply.role;
      ctx.session.email = email.value;
      saveSession(ctx.session);
      ctx.navigate(reply.role === "admin" ? "#/admin" : "#/history");
    } catch (err) {
      feedback.replaceChildren(authDetail(ctx, err));
    }
  };
  const doRegister = async () => {
    try {
      await ctx.api.register(name.value, email.value, password.value);
      await doLogin();
    } catch (err) {
      feedback.replaceChildren(authDetail(ctx, err));
    }
  };

  const loginButton = el("button", { class: "login-button" }, "Sign in");
  loginButton.addEventListener("click", () => void doLogin());
  const registerButton = el("button", { class: "register-button" }, "Register");
  registerButton.addEventListener("click", () => void doRegister());

  root.replaceChildren(
    el("h2", {}, "Sign in"),
    email, password, loginButton,
    el("h3", {}, "or register"),
    name, registerButton,
    feedback,
  );
  return { destroy() {} };
}
