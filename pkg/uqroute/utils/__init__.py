# uqroute/utils package
