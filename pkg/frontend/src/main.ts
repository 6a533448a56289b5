/**
 * Browser entry point. The grading server address defaults to the page
 * origin and can be overridden with a `?server=` query parameter, so the
 * static page can be opened from disk against any running session.
 */

import { SessionApi } from "./api.js";
import { GradingApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("server") ?? window.location.origin;
const root = document.querySelector<HTMLElement>("#app");

if (!root) {
  throw new Error("page is missing the #app container");
}

const app = new GradingApp(new SessionApi(base), root);
app.start().catch((err: unknown) => {
  root.textContent = `could not reach the grading server at ${base}: ${String(err)}`;
});
