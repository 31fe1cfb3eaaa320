import { Api } from "./api.js";
import { SessionFlow } from "./state.js";
import { RatingView } from "./view.js";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app mount point");
}
const flow = new SessionFlow(new Api(fetch.bind(window)));
new RatingView(root, flow);
void flow.start();
