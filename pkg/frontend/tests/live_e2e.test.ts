// @vitest-environment jsdom
/** End-to-end: the real compiled views against a live small deployment
 * (scheduler + 3 executors + portal + task client as OS processes). The
 * sandbox has no browser runtime, so jsdom hosts the DOM while all HTTP
 * traffic is real. */

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, PortalApi, QueueStats } from "../src/api.js";
import { loadSession } from "../src/state.js";
import { subscribeStats } from "../src/sse.js";
import { Ctx, historyView, resultView, submitView } from "../src/views.js";
import { Deployment, startDeployment } from "./deploy.js";

let deployment: Deployment;

beforeAll(async () => {
  deployment = await startDeployment(3);
}, 60_000);

afterAll(() => {
  deployment?.stop();
});

function makeCtx(api: PortalApi): Ctx {
  return {
    api,
    session: loadSession(),
    navigate: () => {},
    now: () => Date.now() / 1000,
    refreshMs: 250,
  };
}

function mount(): HTMLElement {
  const root = document.createElement("div");
  document.body.append(root);
  return root;
}

async function waitFor<T>(fn: () => T | null | undefined, timeoutMs: number,
                          what: string): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const got = fn();
    if (got) return got;
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await new Promise((resolve) => setTimeout(resolve, 100));
  }
}

describe("live deployment", () => {
  it("submit -> history -> result flow through the views", async () => {
    const api = new PortalApi(deployment.base);
    const ctx = makeCtx(api);

    // submit through the submit view
    const submitRoot = mount();
    const submit = submitView(submitRoot, ctx);
    submitRoot.querySelector("textarea")!.value = ">flow\nMKVLANDERQHE\n";
    (submitRoot.querySelector(".submit-button") as HTMLButtonElement).click();
    await waitFor(() => submitRoot.querySelector(".submitted-ids li"), 10_000,
                  "submission ack");
    const id = submitRoot.querySelector(".submitted-ids li")!
      .getAttribute("data-id")!;
    expect(ctx.session.anonTokens[id]).toBeTruthy();

    // the badge flips to completed as the grid finishes the job
    await waitFor(() => submitRoot.querySelector(".badge.state-completed"),
                  30_000, "completed badge on submit view");
    submit.destroy();

    // result view renders the three aligned colored tracks
    const resultRoot = mount();
    const result = resultView(resultRoot, ctx, id);
    const tracks = await waitFor(
      () => resultRoot.querySelector(".result-tracks"), 15_000, "result tracks");
    const seq = tracks.querySelector(".track-seq")!.textContent!;
    const structure = tracks.querySelector(".track-structure")!.textContent!;
    const digits = tracks.querySelector(".track-confidence")!.textContent!;
    expect(seq).toBe("MKVLANDERQHE");
    expect(structure).toMatch(/^[HEC]{12}$/);
    expect(digits).toMatch(/^[0-9]{12}$/);
    expect(tracks.querySelectorAll(".cls-H, .cls-E, .cls-C")).toHaveLength(12);
    result.destroy();

    // a registered user's history view: empty for them (ownership isolation),
    // then showing their own submission
    await api.register("user", "user@e2e", "pw");
    const login = await api.login("user@e2e", "pw");
    const userApi = new PortalApi(deployment.base, login.token);
    const userCtx = makeCtx(userApi);
    const historyRoot = mount();
    const history = historyView(historyRoot, userCtx);
    await waitFor(() => historyRoot.querySelector(".history-table thead"), 10_000,
                  "history table");
    expect(historyRoot.querySelectorAll(".request-row")).toHaveLength(0);

    const mine = await userApi.submit(">mine\nMKVLA\n");
    await waitFor(() => historyRoot.querySelector(
      `.request-row[data-id="${mine.request_ids[0]}"]`), 15_000,
      "own request in history");
    history.destroy();
  }, 90_000);

  it("admin live stats reflect a 64-job burst: spike then drain", async () => {
    const api = new PortalApi(deployment.base);
    const login = await api.login(deployment.adminEmail, deployment.adminPassword);
    const admin = new PortalApi(deployment.base, login.token);

    const before = await admin.adminStats();
    const nodes = await admin.adminNodes();
    expect(nodes).toHaveLength(3);

    const snapshots: { stats: QueueStats; at: number }[] = [];
    const subscription = subscribeStats(admin, (stats) => {
      snapshots.push({ stats, at: Date.now() });
    }, () => {});

    const fasta = Array.from({ length: 64 }, (_, n) => `>burst${n}\nMKVLANDERQ\n`)
      .join("");
    const reply = await new PortalApi(deployment.base).submit(fasta);
    expect(reply.request_ids).toHaveLength(64);
    const expectedFinished = before.finished + 64 * 9;

    await waitFor(
      () => snapshots.find((s) => s.stats.finished >= expectedFinished
                                   && s.stats.waiting === 0
                                   && s.stats.running === 0),
      120_000, "burst drained");
    subscription.close();

    const spike = Math.max(...snapshots.map((s) => s.stats.waiting));
    expect(spike).toBeGreaterThan(0);
    const finished = snapshots.map((s) => s.stats.finished);
    expect([...finished].sort((a, b) => a - b)).toEqual(finished); // monotone
    // the push channel delivers snapshots within one push interval (2 s max,
    // plus scheduling slack)
    const gaps = snapshots.slice(1).map((s, i) => s.at - snapshots[i].at);
    expect(Math.max(...gaps)).toBeLessThan(3000);
  }, 180_000);

  it("admin routes are blocked for non-admin and anonymous callers", async () => {
    const api = new PortalApi(deployment.base);
    await api.register("pleb", "pleb@e2e", "pw");
    const login = await api.login("pleb@e2e", "pw");
    const pleb = new PortalApi(deployment.base, login.token);
    for (const call of [
      () => pleb.adminNodes(),
      () => pleb.adminStats(),
      () => pleb.adminUsers(),
      () => pleb.deleteRequest("whatever"),
    ]) {
      const err = await call().then(() => null, (e) => e);
      expect(err).toBeInstanceOf(ApiError);
      expect((err as ApiError).status).toBe(403);
    }
    const anonErr = await new PortalApi(deployment.base).adminNodes()
      .then(() => null, (e) => e);
    expect((anonErr as ApiError).status).toBe(401);

    // the stream endpoint rejects non-admins too
    const streamErr = await new Promise<unknown>((resolve) => {
      const sub = subscribeStats(pleb, () => resolve(new Error("got data")),
                                 (err) => resolve(err));
      setTimeout(() => {
        sub.close();
        resolve(new Error("no error surfaced"));
      }, 5000);
    });
    expect(streamErr).toBeInstanceOf(ApiError);
    expect((streamErr as ApiError).status).toBe(403);
  }, 30_000);
});
