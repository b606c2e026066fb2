/** Hash router and shell: nav bar + one active view at a time. */

import { PortalApi } from "./api.js";
import { el } from "./render.js";
import { clearSession, loadSession } from "./state.js";
import {
  adminView,
  Ctx,
  historyView,
  loginView,
  resultView,
  submitView,
  View,
} from "./views.js";

export function mountConsole(root: HTMLElement, base = ""): { navigate: (h: string) => void } {
  const session = loadSession();
  const api = new PortalApi(base, session.token);
  const outlet = el("main", { class: "outlet" });
  let active: View | null = null;

  const ctx: Ctx = {
    api,
    session,
    navigate: (hash) => {
      if (typeof location !== "undefined" && location.hash !== hash) {
        location.hash = hash;
      }
      render(hash);
    },
    now: () => Date.now() / 1000,
    refreshMs: 2000,
  };

  const render = (hash: string) => {
    if (active) active.destroy();
    const [route, arg] = parseHash(hash);
    if (route === "result" && arg) {
      active = resultView(outlet, ctx, arg);
    } else if (route === "history") {
      active = historyView(outlet, ctx);
    } else if (route === "admin") {
      active = adminView(outlet, ctx);
    } else if (route === "login") {
      active = loginView(outlet, ctx);
    } else {
      active = submitView(outlet, ctx);
    }
  };

  const nav = el(
    "nav",
    { class: "topnav" },
    navLink(ctx, "#/submit", "Submit"),
    navLink(ctx, "#/history", "History"),
    navLink(ctx, "#/admin", "Monitor"),
    navLink(ctx, "#/login", "Sign in"),
  );
  const logout = el("button", { class: "logout-button" }, "Sign out");
  logout.addEventListener("click", () => {
    clearSession(session);
    api.token = null;
    ctx.navigate("#/login");
  });
  nav.append(logout);
  root.replaceChildren(nav, outlet);

  if (typeof window !== "undefined") {
    window.addEventListener("hashchange", () => render(location.hash));
    render(location.hash || "#/submit");
  } else {
    render("#/submit");
  }
  return { navigate: ctx.navigate };
}

function navLink(ctx: Ctx, hash: string, label: string): HTMLElement {
  const a = el("a", { class: "nav-link", href: hash }, label);
  a.addEventListener("click", (ev) => {
    ev.preventDefault();
    ctx.navigate(hash);
  });
  return a;
}

function parseHash(hash: string): [string, string | null] {
  const parts = hash.replace(/^#\//, "").split("/");
  return [parts[0] || "submit", parts[1] ?? null];
}

declare global {
  interface Window {
    jeevaConsole?: ReturnType<typeof mountConsole>;
  }
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  window.jeevaConsole = mountConsole(document.getElementById("app")!);
}
